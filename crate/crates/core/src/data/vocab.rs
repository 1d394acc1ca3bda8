use crate::error::{Error, Result};

/// Stands in for a masked-out sentence in gap-sentence inputs.
pub const MASK_SENT: usize = 0;
pub const PAD: usize = 1;
pub const EOS: usize = 2;
/// Default first decoder input.
pub const BOS: usize = 3;
/// Joins sentences in flattened documents and multi-sentence targets.
pub const SEP: usize = 4;
/// Marks the sentences an extractive summary must copy.
pub const FLAG: usize = 5;
/// Smallest id of an ordinary word.
pub const FIRST_CONTENT: usize = 6;

const RESERVED: [&str; FIRST_CONTENT] = ["<mask_sent>", "<pad>", "</s>", "<s>", "<sep>", "<flag>"];

/// Closed word-level vocabulary: reserved symbols, then words `w6`, `w7`, ...
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size <= FIRST_CONTENT {
            return Err(Error::Config(format!(
                "vocabulary of {size} leaves no room for words after {FIRST_CONTENT} reserved ids"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn num_content(&self) -> usize {
        self.size - FIRST_CONTENT
    }

    pub fn word(&self, id: usize) -> Result<String> {
        match id {
            _ if id >= self.size => Err(Error::IndexOutOfRange {
                index: id,
                extent: self.size,
            }),
            _ if id < FIRST_CONTENT => Ok(RESERVED[id].to_string()),
            _ => Ok(format!("w{id}")),
        }
    }

    /// Surface length of a word in characters.
    pub fn surface_len(&self, id: usize) -> usize {
        if id < FIRST_CONTENT {
            RESERVED[id].len()
        } else {
            1 + id.ilog10() as usize + 1
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                if let Some(i) = RESERVED.iter().position(|r| *r == w) {
                    return Ok(i);
                }
                w.strip_prefix('w')
                    .and_then(|n| n.parse::<usize>().ok())
                    .filter(|&id| (FIRST_CONTENT..self.size).contains(&id) && format!("w{id}") == w)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown word `{w}`")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        Ok(ids.iter().map(|&i| self.word(i)).collect::<Result<Vec<_>>>()?.join(" "))
    }
}
