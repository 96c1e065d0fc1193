use std::collections::HashMap;

use md5::{Digest, Md5};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Unit string reserved for id 0.
pub const UNK: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    units: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(units: Vec<String>) -> Self {
        let index = units
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i))
            .collect();
        Self { units, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.units
    }
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    /// Id of `unit`, or 0 when absent.
    pub fn id(&self, unit: &str) -> usize {
        self.index.get(unit).copied().unwrap_or(0)
    }

    pub fn contains(&self, unit: &str) -> bool {
        self.index.contains_key(unit)
    }

    pub fn unit(&self, id: usize) -> Option<&str> {
        self.units.get(id).map(String::as_str)
    }
}

/// Keeps UNK plus the `max_size - 1` most frequent units, equal counts
/// ordered by the unit string.
pub fn build_vocab<'a, I>(units: I, max_size: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = (&'a str, usize)>,
{
    if max_size == 0 {
        return Err(Error::Config("vocabulary size must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for (u, c) in units {
        if u != UNK {
            *counts.entry(u).or_default() += c;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let units = std::iter::once(UNK.to_string())
        .chain(ranked.into_iter().take(max_size - 1).map(|(u, _)| u.to_string()))
        .collect::<Vec<_>>();
    Ok(Vocabulary::from(units))
}

/// Character inventory for the char encoder. Ids `0..len` are characters,
/// followed by the out-of-alphabet id and the padding id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct CharAlphabet {
    chars: Vec<char>,
    index: HashMap<char, usize>,
}

impl From<Vec<char>> for CharAlphabet {
    fn from(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self { chars, index }
    }
}

impl From<CharAlphabet> for Vec<char> {
    fn from(a: CharAlphabet) -> Self {
        a.chars
    }
}

impl CharAlphabet {
    /// The `max_chars` most frequent characters of the weighted tokens.
    pub fn build<'a, I>(tokens: I, max_chars: usize) -> Self
    where
        I: IntoIterator<Item = (&'a str, usize)>,
    {
        let mut counts: HashMap<char, usize> = HashMap::new();
        for (t, c) in tokens {
            for ch in t.chars() {
                *counts.entry(ch).or_default() += c;
            }
        }
        let mut ranked: Vec<(char, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from(
            ranked
                .into_iter()
                .take(max_chars)
                .map(|(c, _)| c)
                .collect::<Vec<_>>(),
        )
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn ooa(&self) -> usize {
        self.chars.len()
    }

    pub fn pad(&self) -> usize {
        self.chars.len() + 1
    }

    /// Number of one-hot rows including the OOA and padding slots.
    pub fn width(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn id(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(self.ooa())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashingScheme {
    modulus: usize,
}

impl HashingScheme {
    pub fn new(modulus: usize) -> Result<Self> {
        if modulus < 2 {
            return Err(Error::Config(format!("hash modulus must be at least 2, got {modulus}")));
        }
        Ok(Self { modulus })
    }

    pub fn modulus(&self) -> usize {
        self.modulus
    }

    /// MD5 of the UTF-8 bytes read as a big-endian 128-bit integer, reduced
    /// modulo the table size.
    pub fn id(&self, s: &str) -> usize {
        let digest: [u8; 16] = Md5::digest(s.as_bytes()).into();
        (u128::from_be_bytes(digest) % self.modulus as u128) as usize
    }
}
