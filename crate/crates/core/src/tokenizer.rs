//! Byte-level tokenizer: ids `0..256` are raw bytes, followed by four
//! reserved specials that `encode` never produces.

use crate::error::{Error, Result};
use crate::model::TokenId;

pub const PAD: TokenId = 256;
pub const BOS: TokenId = 257;
pub const SEP: TokenId = 258;
pub const EOC: TokenId = 259;
pub const VOCAB_SIZE: usize = 260;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, bytes: &[u8]) -> Vec<TokenId> {
        bytes.iter().map(|&b| TokenId::from(b)).collect()
    }

    pub fn encode_str(&self, s: &str) -> Vec<TokenId> {
        self.encode(s.as_bytes())
    }

    /// Inverse of [`Tokenizer::encode`]; special ids are rejected.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        ids.iter()
            .map(|&id| {
                u8::try_from(id).map_err(|_| Error::Input(format!("token {id} is not a byte token")))
            })
            .collect()
    }

    pub fn is_special(id: TokenId) -> bool {
        (PAD..VOCAB_SIZE as TokenId).contains(&id)
    }

    /// `BOS prompt SEP`: the shared context of a preference pair.
    pub fn prompt_ids(&self, prompt: &str) -> Vec<TokenId> {
        let mut ids = Vec::with_capacity(prompt.len() + 2);
        ids.push(BOS);
        ids.extend(self.encode_str(prompt));
        ids.push(SEP);
        ids
    }

    /// Response bytes, optionally terminated by the end-of-context marker.
    pub fn response_ids(&self, response: &str, eoc: bool) -> Vec<TokenId> {
        let mut ids = self.encode_str(response);
        if eoc {
            ids.push(EOC);
        }
        ids
    }
}
