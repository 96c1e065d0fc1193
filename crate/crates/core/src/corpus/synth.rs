//! Synthetic completion corpus with controllable name and call-sequence cues.
//!
//! Every receiver type owns a disjoint set of `verb_noun` methods, so types
//! (and libraries built from them) never share a member name while sharing
//! the subtoken vocabulary. Targets follow a per-type Zipf prior. Two cues
//! can point at the target:
//!
//! * a variable named after the target's subtokens (`read_file_tmp = recv .`)
//! * an earlier call on the same receiver to the target's fixed predecessor.
//!
//! A second variable of the same type with its own call sits between the two
//! so that the most recent call is not always the receiver's.

use std::collections::HashMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CompletionInstance, CONTEXT_SIZE};
use crate::{Error, Result};

const VERBS: [&str; 24] = [
    "get", "set", "read", "write", "open", "close", "load", "save", "parse", "build", "send",
    "fetch", "find", "sort", "merge", "split", "clear", "reset", "count", "check", "update",
    "create", "remove", "copy",
];

const NOUNS: [&str; 30] = [
    "file", "name", "path", "size", "key", "value", "line", "page", "user", "node", "list", "text",
    "row", "col", "index", "token", "frame", "image", "block", "cache", "query", "record", "field",
    "event", "stream", "buffer", "table", "group", "state", "config",
];

const TYPE_STEMS: [&str; 10] = [
    "Array", "Socket", "Graph", "Image", "Vector", "Tensor", "Session", "Archive", "Logger",
    "Matrix",
];
const TYPE_SUFFIXES: [&str; 4] = ["", "Client", "Reader", "Manager"];

/// Variable names sharing no subtoken with any method.
const NOISE_NAMES: [&str; 16] = [
    "foo", "bar", "baz", "qux", "alpha", "beta", "gamma", "delta", "obj", "ctx", "ref", "acc",
    "flag", "total", "res", "out",
];
const FILLERS: [&str; 5] = ["tmp", "new", "my", "cur", "old"];
const ARGS: [&str; 6] = ["x", "y", "z", "0", "1", "None"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_types: usize,
    pub methods_per_type: usize,
    /// Probability that a context variable carries the target's subtokens.
    pub subtoken_strength: f64,
    /// Probability that the receiver's earlier call predicts the target.
    pub sequential_strength: f64,
    pub n_instances: usize,
    pub seed: u64,
    #[serde(default = "default_libraries")]
    pub n_libraries: usize,
    #[serde(default = "default_per_file")]
    pub instances_per_file: usize,
}

fn default_libraries() -> usize {
    4
}
fn default_per_file() -> usize {
    10
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_types: 20,
            methods_per_type: 15,
            subtoken_strength: 0.8,
            sequential_strength: 0.8,
            n_instances: 20_000,
            seed: 0,
            n_libraries: default_libraries(),
            instances_per_file: default_per_file(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("subtoken_strength", self.subtoken_strength),
            ("sequential_strength", self.sequential_strength),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.n_types == 0
            || self.methods_per_type == 0
            || self.n_instances == 0
            || self.n_libraries == 0
            || self.instances_per_file == 0
        {
            return Err(Error::Config("synthetic corpus counts must be positive".into()));
        }
        if self.n_types * self.methods_per_type > VERBS.len() * NOUNS.len() {
            return Err(Error::Config(format!(
                "at most {} distinct methods available",
                VERBS.len() * NOUNS.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthType {
    pub name: String,
    pub library: String,
    /// Sorted method names.
    pub methods: Vec<String>,
    /// Prior probability per entry of `methods`.
    pub prior: Vec<f64>,
    /// Index of the method whose call precedes each method under the
    /// sequential cue.
    pub predecessor: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthWorld {
    pub types: Vec<SynthType>,
}

impl SynthWorld {
    /// Receiver type owning `method`, if any.
    pub fn type_of(&self, method: &str) -> Option<&SynthType> {
        self.types.iter().find(|t| t.methods.iter().any(|m| m == method))
    }

    /// `{type name: methods}` table usable by the scope provider.
    pub fn api_table(&self) -> HashMap<String, Vec<String>> {
        self.types
            .iter()
            .map(|t| (t.name.clone(), t.methods.clone()))
            .collect()
    }
}

fn type_name(i: usize) -> String {
    let base = TYPE_STEMS.len() * TYPE_SUFFIXES.len();
    let stem = TYPE_STEMS[i % TYPE_STEMS.len()];
    let suffix = TYPE_SUFFIXES[(i / TYPE_STEMS.len()) % TYPE_SUFFIXES.len()];
    if i < base {
        format!("{stem}{suffix}")
    } else {
        format!("{stem}{suffix}{}", i / base)
    }
}

/// Builds the types, method sets and priors for `spec` without sampling any
/// instances.
pub fn synth_world(spec: &SynthSpec) -> Result<SynthWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pool: Vec<String> = VERBS
        .iter()
        .flat_map(|v| NOUNS.iter().map(move |n| format!("{v}_{n}")))
        .collect();
    pool.shuffle(&mut rng);

    let m = spec.methods_per_type;
    let zipf: Vec<f64> = (1..=m).map(|r| 1.0 / r as f64).collect();
    let z: f64 = zipf.iter().sum();
    let types = (0..spec.n_types)
        .map(|t| {
            let mut methods = pool[t * m..(t + 1) * m].to_vec();
            methods.sort();
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng);
            let mut prior = vec![0.0; m];
            for (rank, &i) in order.iter().enumerate() {
                prior[i] = zipf[rank] / z;
            }
            let mut cycle: Vec<usize> = (0..m).collect();
            cycle.shuffle(&mut rng);
            let mut predecessor = vec![0; m];
            for k in 0..m {
                predecessor[cycle[k]] = cycle[(k + 1) % m];
            }
            SynthType {
                name: type_name(t),
                library: format!("lib{}", t % spec.n_libraries),
                methods,
                prior,
                predecessor,
            }
        })
        .collect();
    Ok(SynthWorld { types })
}

fn cue_variable(rng: &mut ChaCha8Rng, method: &str) -> String {
    let mut parts: Vec<&str> = method.split('_').collect();
    let filler = *FILLERS.choose(rng).unwrap();
    if rng.gen_bool(0.5) {
        parts.insert(0, filler);
    } else {
        parts.push(filler);
    }
    if rng.gen_bool(0.7) {
        parts.join("_")
    } else {
        let mut s = parts[0].to_string();
        for p in &parts[1..] {
            let mut cs = p.chars();
            if let Some(c) = cs.next() {
                s.extend(c.to_uppercase());
                s.push_str(cs.as_str());
            }
        }
        s
    }
}

fn noise_variable(rng: &mut ChaCha8Rng) -> String {
    let name = *NOISE_NAMES.choose(rng).unwrap();
    if rng.gen_bool(0.5) {
        format!("{name}{}", rng.gen_range(0..10))
    } else {
        name.to_string()
    }
}

fn call(out: &mut Vec<String>, recv: &str, method: &str, rng: &mut ChaCha8Rng) {
    let arg = *ARGS.choose(rng).unwrap();
    out.extend([recv, ".", method, "(", arg, ")"].map(String::from));
}

fn bind(out: &mut Vec<String>, var: &str, ty: &str) {
    out.extend([var, "=", ty, "(", ")"].map(String::from));
}

/// Samples `spec.n_instances` instances. Identical specs give identical
/// output.
pub fn synth_generate(spec: &SynthSpec) -> Result<Vec<CompletionInstance>> {
    let world = synth_world(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let samplers: Vec<WeightedIndex<f64>> = world
        .types
        .iter()
        .map(|t| WeightedIndex::new(&t.prior).expect("prior is a valid distribution"))
        .collect();

    let mut out = Vec::with_capacity(spec.n_instances);
    for n in 0..spec.n_instances {
        let ti = rng.gen_range(0..world.types.len());
        let ty = &world.types[ti];
        let target_i = samplers[ti].sample(&mut rng);
        let target = &ty.methods[target_i];
        let m = ty.methods.len();

        let recv = noise_variable(&mut rng);
        let other = loop {
            let v = noise_variable(&mut rng);
            if v != recv {
                break v;
            }
        };

        let mut toks = Vec::new();
        for _ in 0..rng.gen_range(2..6) {
            let var = noise_variable(&mut rng);
            if var == recv || var == other {
                continue;
            }
            let nt = &world.types[rng.gen_range(0..world.types.len())];
            bind(&mut toks, &var, &nt.name);
            let meth = &nt.methods[rng.gen_range(0..nt.methods.len())];
            call(&mut toks, &var, meth, &mut rng);
        }
        bind(&mut toks, &recv, &ty.name);
        bind(&mut toks, &other, &ty.name);
        let prior_call = if rng.gen_bool(spec.sequential_strength) {
            ty.predecessor[target_i]
        } else {
            rng.gen_range(0..m)
        };
        call(&mut toks, &recv, &ty.methods[prior_call], &mut rng);
        call(&mut toks, &other, &ty.methods[rng.gen_range(0..m)], &mut rng);

        let result = if rng.gen_bool(spec.subtoken_strength) {
            cue_variable(&mut rng, target)
        } else {
            noise_variable(&mut rng)
        };
        toks.extend([result, "=".into(), recv.clone(), ".".into()]);

        let mut inst = CompletionInstance {
            id: format!("f{:05}:{}", n / spec.instances_per_file, n % spec.instances_per_file),
            receiver_mask: Vec::new(),
            context_tokens: toks,
            candidates: ty.methods.clone(),
            target: target.clone(),
            library: Some(ty.library.clone()),
        };
        inst.truncate_context(CONTEXT_SIZE);
        inst.receiver_mask = inst
            .context_tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == recv)
            .map(|(i, _)| i)
            .collect();
        out.push(inst);
    }
    Ok(out)
}
