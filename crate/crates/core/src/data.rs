//! Datasets: synthetic generation with planted attribute signal, JSONL
//! persistence, deterministic splits and training-set upsampling.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compute::RngSeed;
use crate::encoder::{tokenize, Vocab};
use crate::error::{DamError, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub task_label: usize,
    #[serde(default)]
    pub protected: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

/// Class counts of the task and each protected attribute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub num_task_classes: usize,
    pub attributes: BTreeMap<String, usize>,
}

impl Schema {
    /// Smallest schema covering every label present in the given datasets.
    pub fn infer(parts: &[&Dataset]) -> Schema {
        let mut num_task_classes = 0;
        let mut attributes: BTreeMap<String, usize> = BTreeMap::new();
        for ex in parts.iter().flat_map(|d| &d.examples) {
            num_task_classes = num_task_classes.max(ex.task_label + 1);
            for (k, &v) in &ex.protected {
                let e = attributes.entry(k.clone()).or_default();
                *e = (*e).max(v + 1);
            }
        }
        Schema {
            num_task_classes,
            attributes,
        }
    }

    pub fn attribute_classes(&self, attribute: &str) -> Result<usize> {
        self.attributes
            .get(attribute)
            .copied()
            .ok_or_else(|| DamError::Data(format!("dataset has no protected attribute {attribute:?}")))
    }
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Dataset { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn task_labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.task_label).collect()
    }

    pub fn attribute_labels(&self, attribute: &str) -> Result<Vec<usize>> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| {
                e.protected.get(attribute).copied().ok_or_else(|| {
                    DamError::Data(format!("example {} lacks protected attribute {attribute:?}", i + 1))
                })
            })
            .collect()
    }

    /// Fails with the first example (1-based) missing one of `attributes`.
    pub fn require_attributes(&self, attributes: &[String]) -> Result<()> {
        for a in attributes {
            self.attribute_labels(a)?;
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset::new(indices.iter().map(|&i| self.examples[i].clone()).collect())
    }
}

// ---------------------------------------------------------------------------
// synthetic generation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub id: String,
    pub num_classes: usize,
    /// Probability that each attribute slot holds a token indicative of the
    /// example's attribute value.
    pub signal_strength: f64,
    /// Probability mass with which the task label is tied to this attribute's
    /// value instead of drawn uniformly.
    pub task_correlation: f64,
    /// Class prior; uniform when absent.
    #[serde(default)]
    pub prior: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_examples: usize,
    pub num_task_classes: usize,
    pub attributes: Vec<AttributeSpec>,
    /// Words per text.
    pub text_len: usize,
    /// Slots per text that carry task-indicative tokens.
    pub task_tokens: usize,
    /// Probability that a task slot holds a task-indicative token.
    pub task_signal: f64,
    /// Slots per text reserved for each attribute.
    pub attribute_tokens: usize,
    /// Pool sizes: per task class, per attribute value, and neutral filler.
    pub task_pool: usize,
    pub attribute_pool: usize,
    pub neutral_pool: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_examples: 20_000,
            num_task_classes: 4,
            attributes: vec![AttributeSpec {
                id: "gender".into(),
                num_classes: 2,
                signal_strength: 0.8,
                task_correlation: 0.1,
                prior: None,
            }],
            text_len: 12,
            task_tokens: 3,
            task_signal: 0.9,
            attribute_tokens: 2,
            task_pool: 20,
            attribute_pool: 30,
            neutral_pool: 400,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// The two-attribute shape: binary gender plus five age groups.
    pub fn two_attribute() -> Self {
        SyntheticSpec {
            attributes: vec![
                AttributeSpec {
                    id: "gender".into(),
                    num_classes: 2,
                    signal_strength: 0.8,
                    task_correlation: 0.05,
                    prior: None,
                },
                AttributeSpec {
                    id: "age".into(),
                    num_classes: 5,
                    signal_strength: 0.8,
                    task_correlation: 0.05,
                    prior: None,
                },
            ],
            ..Default::default()
        }
    }

    pub fn task_token(class: usize, i: usize) -> String {
        format!("t{class}x{i}")
    }

    pub fn attribute_token(attribute: &str, value: usize, i: usize) -> String {
        format!("{attribute}{value}x{i}")
    }

    pub fn neutral_token(i: usize) -> String {
        format!("n{i}")
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DamError::Config(m));
        if self.num_examples == 0 || self.num_task_classes < 2 {
            return err("synthetic spec needs examples and at least two task classes".into());
        }
        if self.task_tokens + self.attribute_tokens * self.attributes.len() > self.text_len {
            return err(format!(
                "text_len {} cannot hold {} task and {} attribute slots",
                self.text_len,
                self.task_tokens,
                self.attribute_tokens * self.attributes.len()
            ));
        }
        if self.task_pool < self.task_tokens {
            return err(format!(
                "task pool of {} is too small for {} task slots",
                self.task_pool, self.task_tokens
            ));
        }
        if self.attribute_pool < self.attribute_tokens {
            return err(format!(
                "attribute pool of {} is too small for {} attribute slots",
                self.attribute_pool, self.attribute_tokens
            ));
        }
        if self.neutral_pool < self.text_len {
            return err(format!(
                "neutral pool of {} is too small for texts of {} words",
                self.neutral_pool, self.text_len
            ));
        }
        if !(0.0..=1.0).contains(&self.task_signal) {
            return err("task_signal must be a probability".into());
        }
        let mut ids = BTreeSet::new();
        let mut corr = 0.0;
        for a in &self.attributes {
            if a.id.is_empty() || a.id != a.id.to_lowercase() || a.id.contains(char::is_whitespace) {
                return err(format!("attribute id {:?} must be a lowercase word", a.id));
            }
            if !ids.insert(a.id.clone()) {
                return err(format!("duplicate attribute {}", a.id));
            }
            if a.num_classes < 2 {
                return err(format!("attribute {} needs at least two classes", a.id));
            }
            if !(0.0..=1.0).contains(&a.signal_strength) || !(0.0..=1.0).contains(&a.task_correlation) {
                return err(format!("attribute {} strengths must be probabilities", a.id));
            }
            if let Some(p) = &a.prior {
                if p.len() != a.num_classes || p.iter().any(|&x| !(x >= 0.0)) || p.iter().sum::<f64>() <= 0.0 {
                    return err(format!("attribute {} prior is not a distribution", a.id));
                }
            }
            corr += a.task_correlation;
        }
        if corr > 1.0 {
            return err(format!("task correlations sum to {corr} > 1"));
        }
        // pools must be disjoint
        let mut seen = HashSet::new();
        for c in 0..self.num_task_classes {
            for i in 0..self.task_pool {
                seen.insert(Self::task_token(c, i));
            }
        }
        for i in 0..self.neutral_pool {
            if !seen.insert(Self::neutral_token(i)) {
                return err("neutral pool overlaps another pool".into());
            }
        }
        for a in &self.attributes {
            for v in 0..a.num_classes {
                for i in 0..self.attribute_pool {
                    if !seen.insert(Self::attribute_token(&a.id, v, i)) {
                        return err(format!("token pool of attribute {} overlaps another pool", a.id));
                    }
                }
            }
        }
        Ok(())
    }
}

fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, prior: Option<&[f64]>, n: usize) -> usize {
    match prior {
        None => rng.random_range(0..n),
        Some(p) => {
            let total: f64 = p.iter().sum();
            let mut u = rng.random::<f64>() * total;
            for (i, &w) in p.iter().enumerate() {
                if u < w {
                    return i;
                }
                u -= w;
            }
            n - 1
        }
    }
}

/// Generates a dataset whose texts mix task tokens, attribute tokens and
/// neutral filler. The output is a pure function of the spec.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = RngSeed(spec.seed).derive("synthetic").rng();
    let t = spec.num_task_classes;
    let mut examples = Vec::with_capacity(spec.num_examples);
    for _ in 0..spec.num_examples {
        let values: Vec<usize> = spec
            .attributes
            .iter()
            .map(|a| sample_categorical(&mut rng, a.prior.as_deref(), a.num_classes))
            .collect();
        let mut task = None;
        let mut u: f64 = rng.random();
        for (i, (a, &v)) in spec.attributes.iter().zip(&values).enumerate() {
            if u < a.task_correlation {
                task = Some((v + i) % t);
                break;
            }
            u -= a.task_correlation;
        }
        let task = task.unwrap_or_else(|| rng.random_range(0..t));

        let mut words = Vec::with_capacity(spec.text_len);
        let mut draw_pool = |rng: &mut _, count: usize, pool: usize, p: f64, make: &dyn Fn(usize) -> String| {
            let mut picks: Vec<usize> = (0..pool).collect();
            picks.shuffle(rng);
            let mut n = 0;
            for _ in 0..count {
                if Rng::random::<f64>(rng) < p {
                    words.push(Some(make(picks[n])));
                    n += 1;
                } else {
                    words.push(None);
                }
            }
        };
        draw_pool(&mut rng, spec.task_tokens, spec.task_pool, spec.task_signal, &|i| {
            SyntheticSpec::task_token(task, i)
        });
        for (a, &v) in spec.attributes.iter().zip(&values) {
            draw_pool(&mut rng, spec.attribute_tokens, spec.attribute_pool, a.signal_strength, &|i| {
                SyntheticSpec::attribute_token(&a.id, v, i)
            });
        }
        while words.len() < spec.text_len {
            words.push(None);
        }
        let mut neutral: Vec<usize> = (0..spec.neutral_pool).collect();
        neutral.shuffle(&mut rng);
        let mut next_neutral = neutral.into_iter();
        let mut words: Vec<String> = words
            .into_iter()
            .map(|w| w.unwrap_or_else(|| SyntheticSpec::neutral_token(next_neutral.next().unwrap())))
            .collect();
        words.shuffle(&mut rng);
        examples.push(Example {
            text: words.join(" "),
            task_label: task,
            protected: spec
                .attributes
                .iter()
                .zip(&values)
                .map(|(a, &v)| (a.id.clone(), v))
                .collect(),
        });
    }
    Ok(Dataset::new(examples))
}

// ---------------------------------------------------------------------------
// splits and upsampling

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    /// train : validation : test, summing to one.
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            ratios: [0.70, 0.13, 0.17],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Random, disjoint and exhaustive split.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    if spec.ratios.iter().any(|&r| !(r >= 0.0)) || (spec.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DamError::Config(format!("split ratios {:?} must sum to 1", spec.ratios)));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut RngSeed(spec.seed).derive("split").rng());
    let n = ds.len() as f64;
    let n_train = (n * spec.ratios[0]).round() as usize;
    let n_val = ((n * spec.ratios[1]).round() as usize).min(ds.len() - n_train);
    Ok(Splits {
        train: ds.subset(&idx[..n_train]),
        val: ds.subset(&idx[n_train..n_train + n_val]),
        test: ds.subset(&idx[n_train + n_val..]),
    })
}

/// Balances the protected-attribute groups within every task label by
/// repeating examples of the smaller groups. With several attributes the
/// groups are the cells of their cross-product. Only meant for training
/// sets.
pub fn upsample(train: &Dataset, schema: &Schema, seed: u64) -> Result<Dataset> {
    let attrs: Vec<(&String, usize)> = schema.attributes.iter().map(|(k, &v)| (k, v)).collect();
    let mut cells: BTreeMap<(usize, Vec<usize>), Vec<usize>> = BTreeMap::new();
    for (i, ex) in train.examples.iter().enumerate() {
        let key: Vec<usize> = attrs
            .iter()
            .map(|(a, _)| {
                ex.protected
                    .get(*a)
                    .copied()
                    .ok_or_else(|| DamError::Data(format!("example {} lacks attribute {a}", i + 1)))
            })
            .collect::<Result<_>>()?;
        cells.entry((ex.task_label, key)).or_default().push(i);
    }
    let mut out = Vec::new();
    for task in 0..schema.num_task_classes {
        if !cells.keys().any(|(t, _)| *t == task) {
            continue;
        }
        let mut combos = vec![Vec::new()];
        for &(_, n) in &attrs {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    (0..n).map(move |v| {
                        let mut c = c.clone();
                        c.push(v);
                        c
                    })
                })
                .collect();
        }
        let members: Vec<(&Vec<usize>, &Vec<usize>)> = combos
            .iter()
            .map(|c| {
                cells.get(&(task, c.clone())).map(|m| (c, m)).ok_or_else(|| {
                    let desc: Vec<String> = attrs.iter().zip(c).map(|((a, _), v)| format!("{a}={v}")).collect();
                    DamError::Data(format!("empty upsampling cell: task={task}, {}", desc.join(", ")))
                })
            })
            .collect::<Result<_>>()?;
        let target = members.iter().map(|(_, m)| m.len()).max().unwrap_or(0);
        for (_, m) in members {
            out.extend((0..target).map(|k| train.examples[m[k % m.len()]].clone()));
        }
    }
    out.shuffle(&mut RngSeed(seed).derive("upsample").rng());
    Ok(Dataset::new(out))
}

// ---------------------------------------------------------------------------
// JSONL

pub fn save_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| DamError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for ex in &ds.examples {
        let line = serde_json::to_string(ex).expect("example serializes");
        writeln!(w, "{line}").map_err(|e| DamError::io(path, e))?;
    }
    w.flush().map_err(|e| DamError::io(path, e))
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| DamError::io(path, e))?;
    let mut examples = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| DamError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| DamError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        examples.push(ex);
    }
    Ok(Dataset::new(examples))
}

// ---------------------------------------------------------------------------
// tokenized view

/// Token ids and labels ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDataset {
    pub tokens: Vec<Vec<usize>>,
    pub task: Vec<usize>,
    pub attributes: BTreeMap<String, Vec<usize>>,
}

impl EncodedDataset {
    pub fn new(ds: &Dataset, vocab: &Vocab, max_seq_len: usize, attributes: &[String]) -> Result<Self> {
        let mut attrs = BTreeMap::new();
        for a in attributes {
            attrs.insert(a.clone(), ds.attribute_labels(a)?);
        }
        Ok(EncodedDataset {
            tokens: ds.examples.iter().map(|e| tokenize(&e.text, vocab, max_seq_len)).collect(),
            task: ds.task_labels(),
            attributes: attrs,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn attribute(&self, a: &str) -> Result<&[usize]> {
        self.attributes
            .get(a)
            .map(Vec::as_slice)
            .ok_or_else(|| DamError::Data(format!("no labels for attribute {a:?}")))
    }
}

/// Plug-in estimate of mutual information (nats) between two discrete
/// variables.
pub fn mutual_information(x: &[usize], y: &[usize]) -> f64 {
    let n = x.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut px: BTreeMap<usize, f64> = BTreeMap::new();
    let mut py: BTreeMap<usize, f64> = BTreeMap::new();
    for (&a, &b) in x.iter().zip(y) {
        *joint.entry((a, b)).or_default() += 1.0;
        *px.entry(a).or_default() += 1.0;
        *py.entry(b).or_default() += 1.0;
    }
    joint
        .iter()
        .map(|(&(a, b), &c)| {
            let pxy = c / n;
            pxy * (pxy / ((px[&a] / n) * (py[&b] / n))).ln()
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_examples: 2000,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
        let mut other = small_spec();
        other.seed = 1;
        assert_ne!(a, generate_synthetic(&other).unwrap());
    }

    #[test]
    fn texts_have_requested_length_and_labels() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        for ex in &ds.examples {
            assert_eq!(ex.text.split_whitespace().count(), 12);
            assert!(ex.task_label < 4);
            assert!(ex.protected["gender"] < 2);
        }
    }

    #[test]
    fn pools_too_small_is_error() {
        let mut s = small_spec();
        s.attribute_pool = 1;
        assert!(matches!(generate_synthetic(&s), Err(DamError::Config(_))));
        let mut s = small_spec();
        s.text_len = 3;
        assert!(generate_synthetic(&s).is_err());
    }

    #[test]
    fn attribute_id_must_not_collide_with_other_pools() {
        let mut s = small_spec();
        s.attributes[0].id = "t".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_seeded() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        let tagged = Dataset::new(
            ds.examples
                .iter()
                .enumerate()
                .map(|(i, e)| Example {
                    text: format!("{} id{i}", e.text),
                    ..e.clone()
                })
                .collect(),
        );
        let s = split(&tagged, &SplitSpec::default()).unwrap();
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 2000);
        assert_eq!(s.train.len(), 1400);
        let mut texts: Vec<&str> = [&s.train, &s.val, &s.test]
            .iter()
            .flat_map(|d| d.examples.iter().map(|e| e.text.as_str()))
            .collect();
        texts.sort();
        texts.dedup();
        assert_eq!(texts.len(), 2000);
        assert_eq!(s, split(&tagged, &SplitSpec::default()).unwrap());
        assert!(split(&tagged, &SplitSpec { ratios: [0.5, 0.2, 0.2], seed: 0 }).is_err());
    }

    fn ex(task: usize, g: usize) -> Example {
        Example {
            text: format!("x{task}{g}"),
            task_label: task,
            protected: [("g".to_string(), g)].into(),
        }
    }

    #[test]
    fn upsample_repeats_minority_group() {
        let mut v: Vec<Example> = (0..30).map(|_| ex(0, 0)).collect();
        v.extend((0..10).map(|_| ex(0, 1)));
        let ds = Dataset::new(v);
        let schema = Schema::infer(&[&ds]);
        let up = upsample(&ds, &schema, 0).unwrap();
        let g1 = up.examples.iter().filter(|e| e.protected["g"] == 1).count();
        let g0 = up.examples.iter().filter(|e| e.protected["g"] == 0).count();
        assert_eq!((g0, g1), (30, 30));
    }

    #[test]
    fn upsample_balanced_is_noop_up_to_order() {
        let ds = Dataset::new(vec![ex(0, 0), ex(0, 1), ex(1, 0), ex(1, 1)]);
        let schema = Schema::infer(&[&ds]);
        let mut up = upsample(&ds, &schema, 3).unwrap().examples;
        let mut orig = ds.examples.clone();
        up.sort_by(|a, b| a.text.cmp(&b.text));
        orig.sort_by(|a, b| a.text.cmp(&b.text));
        assert_eq!(up, orig);
    }

    #[test]
    fn upsample_empty_cell_names_it() {
        let ds = Dataset::new(vec![ex(0, 0), ex(0, 1), ex(1, 0)]);
        let schema = Schema::infer(&[&ds]);
        let err = upsample(&ds, &schema, 0).unwrap_err().to_string();
        assert!(err.contains("task=1") && err.contains("g=1"), "{err}");
    }

    #[test]
    fn upsample_two_attributes_balances_cross_cells() {
        let ds = generate_synthetic(&SyntheticSpec {
            num_examples: 3000,
            ..SyntheticSpec::two_attribute()
        })
        .unwrap();
        let schema = Schema::infer(&[&ds]);
        let up = upsample(&ds, &schema, 0).unwrap();
        assert!(up.len() >= ds.len());
        for t in 0..4 {
            let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
            for e in up.examples.iter().filter(|e| e.task_label == t) {
                *counts.entry((e.protected["gender"], e.protected["age"])).or_default() += 1;
            }
            assert_eq!(counts.len(), 10);
            let first = *counts.values().next().unwrap();
            assert!(counts.values().all(|&c| c == first));
        }
    }

    #[test]
    fn jsonl_parses_record_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        std::fs::write(&path, "{\"text\":\"a b c\",\"task_label\":0,\"protected\":{\"gender\":1}}\n").unwrap();
        let ds = load_jsonl(&path).unwrap();
        assert_eq!(ds.examples[0].text, "a b c");
        assert_eq!(ds.examples[0].task_label, 0);
        assert_eq!(ds.examples[0].protected["gender"], 1);

        let gen = generate_synthetic(&SyntheticSpec {
            num_examples: 50,
            ..SyntheticSpec::two_attribute()
        })
        .unwrap();
        save_jsonl(&gen, &path).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), gen);
    }

    #[test]
    fn jsonl_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"text\":\"a\",\"task_label\":0}\n{\"text\": 3}\n").unwrap();
        match load_jsonl(&path) {
            Err(DamError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&path, "{\"text\":\"a\",\"task_label\":0}\n").unwrap();
        let ds = load_jsonl(&path).unwrap();
        assert!(matches!(
            ds.require_attributes(&["gender".into()]),
            Err(DamError::Data(_))
        ));
    }

    /// Which attribute value, if any, the text carries a token for.
    fn token_evidence(ds: &Dataset, attr: &str) -> Vec<usize> {
        ds.examples
            .iter()
            .map(|e| {
                e.text
                    .split_whitespace()
                    .find_map(|w| {
                        w.strip_prefix(attr)
                            .and_then(|r| r.split('x').next())
                            .and_then(|v| v.parse::<usize>().ok())
                            .map(|v| v + 1)
                    })
                    .unwrap_or(0)
            })
            .collect()
    }

    #[test]
    fn mutual_information_grows_with_signal() {
        let mut mis = Vec::new();
        for s in [0.2, 0.5, 0.8] {
            let mut spec = small_spec();
            spec.attributes[0].signal_strength = s;
            let ds = generate_synthetic(&spec).unwrap();
            mis.push(mutual_information(
                &token_evidence(&ds, "gender"),
                &ds.attribute_labels("gender").unwrap(),
            ));
        }
        assert!(mis[0] < mis[1] && mis[1] < mis[2], "{mis:?}");
    }

    #[test]
    fn bag_of_words_oracle_recovers_full_signal() {
        let mut spec = small_spec();
        spec.attributes[0].signal_strength = 1.0;
        let ds = generate_synthetic(&spec).unwrap();
        let ev = token_evidence(&ds, "gender");
        let labels = ds.attribute_labels("gender").unwrap();
        let acc = ev.iter().zip(&labels).filter(|(e, l)| **e == **l + 1).count() as f64 / ds.len() as f64;
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn two_attribute_oracles_recover_each_attribute() {
        let ds = generate_synthetic(&SyntheticSpec {
            num_examples: 2000,
            ..SyntheticSpec::two_attribute()
        })
        .unwrap();
        for a in ["gender", "age"] {
            let ev = token_evidence(&ds, a);
            let labels = ds.attribute_labels(a).unwrap();
            let present: Vec<_> = ev.iter().zip(&labels).filter(|(e, _)| **e > 0).collect();
            let acc = present.iter().filter(|(e, l)| **e == **l + 1).count() as f64 / present.len() as f64;
            assert_eq!(acc, 1.0, "{a}");
            // slots are independently indicative with p = 0.8: 1 - 0.2^2
            let coverage = present.len() as f64 / ds.len() as f64;
            assert!((coverage - 0.96).abs() < 0.02, "{a}: {coverage}");
        }
    }
}
