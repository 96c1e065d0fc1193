use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

/// Terminal unit appended to every training word. It never takes part in a
/// merge, so it only marks where a word ends during training.
pub const END_MARKER: &str = "</w>";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    alphabet: Vec<char>,
    end_marker: String,
    #[serde(skip)]
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn new(merges: Vec<(String, String)>, alphabet: Vec<char>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Self {
            merges,
            alphabet,
            end_marker: END_MARKER.to_string(),
            ranks,
        }
    }

    /// Rebuilds the rank table after deserialisation.
    pub fn reindex(self) -> Self {
        Self::new(self.merges, self.alphabet)
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn end_marker(&self) -> &str {
        &self.end_marker
    }

    /// Splits `token` into characters and merges pairs in training order.
    /// Characters never seen in training are kept as single units.
    pub fn apply(&self, token: &str) -> Vec<String> {
        let mut units: Vec<String> = token.chars().map(String::from).collect();
        loop {
            let best = units
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let mut merged = Vec::with_capacity(units.len());
            let mut i = 0;
            while i < units.len() {
                if i + 1 < units.len() && units[i] == *l && units[i + 1] == *r {
                    merged.push(format!("{l}{r}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut units[i]));
                    i += 1;
                }
            }
            units = merged;
        }
        units
    }
}

/// Learns up to `merge_budget` merges from `(token, count)` pairs. Each round
/// merges the most frequent adjacent pair, the smallest pair winning ties,
/// and training stops early once no pair occurs at least twice.
pub fn bpe_train<'a, I>(tokens: I, merge_budget: usize) -> BpeModel
where
    I: IntoIterator<Item = (&'a str, usize)>,
{
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (t, c) in tokens {
        *counts.entry(t).or_default() += c;
    }
    let mut alphabet: Vec<char> = counts.keys().flat_map(|t| t.chars()).collect();
    alphabet.sort_unstable();
    alphabet.dedup();

    // The end marker is kept out of the word representation entirely since it
    // can never be part of a merge.
    let mut words: Vec<(Vec<String>, usize)> = counts
        .iter()
        .map(|(t, &c)| (t.chars().map(String::from).collect(), c))
        .collect();

    let mut merges = Vec::new();
    while merges.len() < merge_budget {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (units, c) in &words {
            for w in units.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        let Some((&(l, r), &n)) = pairs
            .iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        if n < 2 {
            break;
        }
        let (l, r) = (l.to_string(), r.to_string());
        for (units, _) in &mut words {
            let mut i = 0;
            while i + 1 < units.len() {
                if units[i] == l && units[i + 1] == r {
                    units[i].push_str(&r);
                    units.remove(i + 1);
                }
                i += 1;
            }
        }
        merges.push((l, r));
    }
    BpeModel::new(merges, alphabet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pair(a: &str, b: &str) -> (String, String) {
        (a.to_string(), b.to_string())
    }

    /// Independent trainer: recount from scratch over an expanded corpus and
    /// pick the best pair by sorting all candidates.
    fn oracle_train(corpus: &[&str], budget: usize) -> Vec<(String, String)> {
        let mut words: Vec<Vec<String>> = corpus
            .iter()
            .map(|t| t.chars().map(|c| c.to_string()).collect())
            .collect();
        let mut merges = Vec::new();
        for _ in 0..budget {
            let mut all: Vec<(String, String)> = Vec::new();
            for w in &words {
                for i in 0..w.len().saturating_sub(1) {
                    all.push((w[i].clone(), w[i + 1].clone()));
                }
            }
            all.sort();
            let mut best: Option<((String, String), usize)> = None;
            let mut i = 0;
            while i < all.len() {
                let j = all[i..].iter().take_while(|p| **p == all[i]).count();
                if best.as_ref().is_none_or(|(_, n)| j > *n) {
                    best = Some((all[i].clone(), j));
                }
                i += j;
            }
            match best {
                Some((p, n)) if n >= 2 => {
                    for w in &mut words {
                        let mut out = Vec::new();
                        let mut k = 0;
                        while k < w.len() {
                            if k + 1 < w.len() && w[k] == p.0 && w[k + 1] == p.1 {
                                out.push(format!("{}{}", p.0, p.1));
                                k += 2;
                            } else {
                                out.push(w[k].clone());
                                k += 1;
                            }
                        }
                        *w = out;
                    }
                    merges.push(p);
                }
                _ => break,
            }
        }
        merges
    }

    #[test]
    fn merge_examples() {
        let m = bpe_train([("abab", 2), ("ab", 1)], 2);
        assert_eq!(m.merges(), &[pair("a", "b"), pair("ab", "ab")]);
        assert_eq!(m.merges(), oracle_train(&["abab", "abab", "ab"], 2).as_slice());
        assert_eq!(m.apply("abab"), vec!["abab"]);
        assert_eq!(m.apply("ba"), vec!["b", "a"]);
        assert!(m.apply("").is_empty());
        assert_eq!(m.apply("abzab"), vec!["ab", "z", "ab"]);
    }

    #[test]
    fn single_char_corpus_has_no_merges() {
        assert!(bpe_train([("a", 10)], 5).merges().is_empty());
        assert!(bpe_train([("abab", 3)], 0).merges().is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = [("read_file", 3), ("file_name", 2), ("read_name", 2)];
        assert_eq!(bpe_train(corpus, 10), bpe_train(corpus, 10));
    }

    #[test]
    fn serde_roundtrip_restores_ranks() {
        let m = bpe_train([("array_inner_product", 3), ("array_sum", 2)], 8);
        let text = serde_json::to_string(&m).unwrap();
        let back: BpeModel = serde_json::from_str::<BpeModel>(&text).unwrap().reindex();
        assert_eq!(back, m);
        assert_eq!(back.apply("array_inner_product"), m.apply("array_inner_product"));
    }

    proptest! {
        #[test]
        fn matches_oracle_trainer(words in proptest::collection::vec("[abc]{1,6}", 1..12), budget in 0usize..8) {
            let refs: Vec<&str> = words.iter().map(|s| s.as_str()).collect();
            let m = bpe_train(refs.iter().map(|w| (*w, 1)), budget);
            let want = oracle_train(&refs, budget);
            prop_assert_eq!(m.merges(), want.as_slice());
        }

        #[test]
        fn apply_preserves_text(words in proptest::collection::vec("[a-d_]{1,8}", 1..10), probe in "[a-e_]{0,10}") {
            let m = bpe_train(words.iter().map(|w| (w.as_str(), 1)), 12);
            let units = m.apply(&probe);
            prop_assert_eq!(units.concat(), probe.clone());
            prop_assert!(units.len() <= probe.chars().count());
        }
    }
}
