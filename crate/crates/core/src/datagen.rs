//! Synthetic scenes with a controllable spurious correlation between context
//! flags and sub-class identity.
//!
//! Every sub-class owns one stereotyped context flag. A flag is raised with
//! probability `bias_rho` when the scene shows its owner and with probability
//! `1 - bias_rho` otherwise, so `bias_rho = 0.5` makes context uninformative and
//! `bias_rho = 1` makes it a perfect shortcut. The evidence vector is the true
//! sub-class's unit pattern; masking removes it and leaves the context.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kb::{build_vocabulary, KbError, KnowledgeBase, Role, Vocabulary};

/// Article opening every caption.
pub const ARTICLE: &str = "a";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("scene {0} is already masked")]
    AlreadyMasked(u64),
    #[error("sub-class '{0}' is not in the knowledge base")]
    UnknownSubclass(String),
    #[error("sub-class '{0}' has no stereotyped context flag in the manifest")]
    UnknownStereotype(String),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubclassSpec {
    pub token: String,
    /// Context word whose flag co-occurs with this sub-class.
    pub context: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class: String,
    pub verbs: Vec<String>,
    pub subclasses: Vec<SubclassSpec>,
}

/// How masked evidence is filled in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    #[default]
    Zero,
    /// Every component set to `1 / evidence_dim`, the mean of the unit patterns.
    Mean,
}

/// Generator settings; fields missing from a config file take their default values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub bias_rho: f64,
    pub classes: Vec<ClassSpec>,
    pub seed: u64,
    pub t_max: usize,
    pub context_dim: usize,
    pub evidence_dim: usize,
    pub mask_fill: MaskFill,
}

fn spec(class: &str, verbs: &[&str], subs: &[(&str, &str)]) -> ClassSpec {
    ClassSpec {
        class: class.into(),
        verbs: verbs.iter().map(|v| v.to_string()).collect(),
        subclasses: subs
            .iter()
            .map(|(t, c)| SubclassSpec {
                token: t.to_string(),
                context: c.to_string(),
            })
            .collect(),
    }
}

impl Default for GenConfig {
    /// Three planted classes with 4, 3 and 2 sub-classes.
    fn default() -> Self {
        let classes = vec![
            spec(
                "person",
                &["sits", "walks", "stands"],
                &[
                    ("man", "office"),
                    ("teenager", "mall"),
                    ("boy", "skateboard"),
                    ("senior", "bench"),
                ],
            ),
            spec(
                "vehicle",
                &["drives", "parks"],
                &[("car", "garage"), ("truck", "highway"), ("bus", "depot")],
            ),
            spec(
                "animal",
                &["plays", "sleeps"],
                &[("dog", "yard"), ("cat", "sofa")],
            ),
        ];
        GenConfig {
            n_train: 2000,
            n_test: 500,
            bias_rho: 0.8,
            classes,
            seed: 0,
            t_max: 4,
            context_dim: 9,
            evidence_dim: 9,
            mask_fill: MaskFill::Zero,
        }
    }
}

impl GenConfig {
    /// Context flag names in flag-index order (sub-classes in declaration order).
    pub fn context_flags(&self) -> Vec<&str> {
        self.classes
            .iter()
            .flat_map(|c| c.subclasses.iter().map(|s| s.context.as_str()))
            .collect()
    }

    pub fn subclass_count(&self) -> usize {
        self.classes.iter().map(|c| c.subclasses.len()).sum()
    }

    /// Flag index of a sub-class's stereotype.
    pub fn stereotype_flag(&self, subclass: &str) -> Option<usize> {
        self.classes
            .iter()
            .flat_map(|c| c.subclasses.iter())
            .position(|s| s.token == subclass)
    }

    /// Sub-class owning a context flag.
    pub fn flag_owner(&self, flag: usize) -> Option<&str> {
        self.classes
            .iter()
            .flat_map(|c| c.subclasses.iter())
            .nth(flag)
            .map(|s| s.token.as_str())
    }

    pub fn class_of(&self, subclass: &str) -> Option<&str> {
        self.classes
            .iter()
            .find(|c| c.subclasses.iter().any(|s| s.token == subclass))
            .map(|c| c.class.as_str())
    }

    pub fn role_hints(&self) -> BTreeMap<String, Role> {
        let mut hints = BTreeMap::new();
        for c in &self.classes {
            hints.insert(c.class.clone(), Role::Class);
            for s in &c.subclasses {
                hints.insert(s.token.clone(), Role::Subclass);
                hints.insert(s.context.clone(), Role::Context);
            }
        }
        hints
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.bias_rho) {
            return bad(format!(
                "bias_rho must lie in [0, 1], got {}",
                self.bias_rho
            ));
        }
        if self.n_train < 1 {
            return bad("n_train must be at least 1".into());
        }
        if self.n_test < 1 {
            return bad("n_test must be at least 1".into());
        }
        if self.t_max < 3 {
            return bad(format!("t_max must be at least 3, got {}", self.t_max));
        }
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        let mut seen = std::collections::HashSet::new();
        seen.insert(ARTICLE.to_string());
        let mut claim = |tok: &str, what: &str| -> Result<(), DataError> {
            if tok.is_empty() || tok.contains(char::is_whitespace) {
                return Err(DataError::InvalidConfig(format!(
                    "{what} token '{tok}' is not a single word"
                )));
            }
            if !seen.insert(tok.to_string()) {
                return Err(DataError::InvalidConfig(format!(
                    "token '{tok}' is used twice"
                )));
            }
            Ok(())
        };
        for c in &self.classes {
            claim(&c.class, "class")?;
            if c.subclasses.len() < 2 {
                return bad(format!("class '{}' needs at least 2 sub-classes", c.class));
            }
            if c.verbs.is_empty() {
                return bad(format!("class '{}' needs at least one verb", c.class));
            }
            for s in &c.subclasses {
                claim(&s.token, "sub-class")?;
                claim(&s.context, "context")?;
            }
        }
        // Verbs may be shared between classes but not with any other role.
        let verbs: std::collections::HashSet<&str> = self
            .classes
            .iter()
            .flat_map(|c| c.verbs.iter().map(String::as_str))
            .collect();
        for v in verbs {
            claim(v, "verb")?;
        }
        let flags = self.subclass_count();
        if self.context_dim != flags {
            return bad(format!(
                "context_dim must equal the number of context flags ({flags}), got {}",
                self.context_dim
            ));
        }
        if self.evidence_dim < flags {
            return bad(format!(
                "evidence_dim must be at least the number of sub-classes ({flags}) for distinct patterns, got {}",
                self.evidence_dim
            ));
        }
        Ok(())
    }
}

/// A synthetic "image" with its ground-truth caption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub id: u64,
    pub context: Vec<f64>,
    pub evidence: Vec<f64>,
    pub masked: bool,
    pub caption: Vec<String>,
    pub true_subclass: String,
}

/// Generator settings echoed next to the data, plus the role hints and vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GenConfig,
    pub role_hints: BTreeMap<String, Role>,
    pub vocabulary: Vocabulary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    pub vocab: Vocabulary,
    pub manifest: Manifest,
}

/// Train and test splits sharing one vocabulary and manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn scene(&self, id: u64) -> Option<&Scene> {
        self.scenes.iter().find(|s| s.id == id)
    }

    pub fn config(&self) -> &GenConfig {
        &self.manifest.config
    }

    /// Caption text used for knowledge-base extraction: every caption, plus its
    /// class-level rewrite in which the sub-class is replaced by its class token.
    pub fn kb_corpus(&self) -> Vec<Vec<String>> {
        kb_corpus(&self.scenes, &self.manifest.config)
    }

    fn with_scenes(&self, scenes: Vec<Scene>) -> Dataset {
        Dataset {
            scenes,
            vocab: self.vocab.clone(),
            manifest: self.manifest.clone(),
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), DataError> {
        for s in &self.scenes {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, manifest: Manifest) -> Result<Dataset, DataError> {
        let mut scenes = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let scene: Scene = serde_json::from_str(&line)
                .map_err(|e| DataError::Malformed(format!("line {}: {e}", lineno + 1)))?;
            scenes.push(scene);
        }
        let ds = Dataset {
            scenes,
            vocab: manifest.vocabulary.clone(),
            manifest,
        };
        ds.check()?;
        Ok(ds)
    }

    /// Checks the scene invariants against the manifest.
    pub fn check(&self) -> Result<(), DataError> {
        let cfg = &self.manifest.config;
        let mut ids = std::collections::HashSet::new();
        for s in &self.scenes {
            let bad = |m: &str| Err(DataError::Malformed(format!("scene {}: {m}", s.id)));
            if !ids.insert(s.id) {
                return bad("duplicate id");
            }
            if s.context.len() != cfg.context_dim || s.evidence.len() != cfg.evidence_dim {
                return bad("feature dimensions disagree with the manifest");
            }
            if s.masked
                && s.evidence
                    .iter()
                    .any(|&e| e != fill_value(cfg.mask_fill, cfg.evidence_dim))
            {
                return bad("masked scene carries evidence");
            }
            if s.caption.len() > cfg.t_max {
                return bad("caption longer than t_max");
            }
            if !s.masked && s.caption.iter().filter(|t| **t == s.true_subclass).count() != 1 {
                return bad("caption must mention the true sub-class exactly once");
            }
            self.vocab.encode(&s.caption)?;
        }
        Ok(())
    }
}

fn kb_corpus(scenes: &[Scene], cfg: &GenConfig) -> Vec<Vec<String>> {
    let mut out = Vec::with_capacity(2 * scenes.len());
    for s in scenes {
        out.push(s.caption.clone());
        if let Some(class) = cfg.class_of(&s.true_subclass) {
            out.push(
                s.caption
                    .iter()
                    .map(|t| {
                        if *t == s.true_subclass {
                            class.to_string()
                        } else {
                            t.clone()
                        }
                    })
                    .collect(),
            );
        }
    }
    out
}

fn scene_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn generate_scene(cfg: &GenConfig, id: u64) -> Scene {
    let mut rng = scene_rng(cfg.seed, id);
    let class_idx = rng.gen_range(0..cfg.classes.len());
    let class = &cfg.classes[class_idx];
    let sub_local = rng.gen_range(0..class.subclasses.len());
    let sub = &class.subclasses[sub_local];
    let sub_global = cfg
        .stereotype_flag(&sub.token)
        .expect("sub-class from config");

    let mut evidence = vec![0.0; cfg.evidence_dim];
    evidence[sub_global] = 1.0;

    let mut context = vec![0.0; cfg.context_dim];
    for (flag, slot) in context.iter_mut().enumerate() {
        let p = if flag == sub_global {
            cfg.bias_rho
        } else {
            1.0 - cfg.bias_rho
        };
        if rng.gen_bool(p) {
            *slot = 1.0;
        }
    }

    let verb = class
        .verbs
        .choose(&mut rng)
        .expect("validated: verbs non-empty");
    let mut caption = vec![ARTICLE.to_string(), sub.token.clone(), verb.clone()];
    if cfg.t_max >= 4 {
        // the caption names a raised flag of the scene's own class, if any
        let first_flag = sub_global - sub_local;
        let own: Vec<usize> = (first_flag..first_flag + class.subclasses.len())
            .filter(|&f| context[f] == 1.0)
            .collect();
        if let Some(&f) = own.choose(&mut rng) {
            caption.push(class.subclasses[f - first_flag].context.clone());
        }
    }
    Scene {
        id,
        context,
        evidence,
        masked: false,
        caption,
        true_subclass: sub.token.clone(),
    }
}

/// Generates train scenes with ids `0..n_train` and test scenes after them.
pub fn generate_dataset(cfg: &GenConfig) -> Result<GeneratedData, DataError> {
    cfg.validate()?;
    let n_train = cfg.n_train as u64;
    let n_all = n_train + cfg.n_test as u64;
    let mut scenes: Vec<Scene> = (0..n_all).map(|id| generate_scene(cfg, id)).collect();
    let test = scenes.split_off(cfg.n_train);

    let role_hints = cfg.role_hints();
    let mut corpus = kb_corpus(&scenes, cfg);
    corpus.extend(kb_corpus(&test, cfg));
    // Every configured token must be present even if a tiny sample never drew it.
    let mut declared: Vec<String> = vec![ARTICLE.to_string()];
    for c in &cfg.classes {
        declared.push(c.class.clone());
        declared.extend(c.verbs.iter().cloned());
        for s in &c.subclasses {
            declared.push(s.token.clone());
            declared.push(s.context.clone());
        }
    }
    corpus.push(declared);
    let vocab = build_vocabulary(&corpus, &role_hints)?;

    let manifest = Manifest {
        config: cfg.clone(),
        role_hints,
        vocabulary: vocab.clone(),
        created_unix: None,
    };
    Ok(GeneratedData {
        train: Dataset {
            scenes,
            vocab: vocab.clone(),
            manifest: manifest.clone(),
        },
        test: Dataset {
            scenes: test,
            vocab,
            manifest,
        },
    })
}

fn fill_value(fill: MaskFill, dim: usize) -> f64 {
    match fill {
        MaskFill::Zero => 0.0,
        MaskFill::Mean => 1.0 / dim as f64,
    }
}

/// Removes the evidence of a scene, keeping context and caption.
pub fn mask_scene(s: &Scene) -> Result<Scene, DataError> {
    mask_scene_with(s, MaskFill::Zero)
}

pub fn mask_scene_with(s: &Scene, fill: MaskFill) -> Result<Scene, DataError> {
    if s.masked {
        return Err(DataError::AlreadyMasked(s.id));
    }
    let value = fill_value(fill, s.evidence.len());
    Ok(Scene {
        evidence: vec![value; s.evidence.len()],
        masked: true,
        ..s.clone()
    })
}

/// True when the scene's stereotype flag is raised for its own sub-class.
pub fn is_stereotypical(s: &Scene, cfg: &GenConfig) -> Result<bool, DataError> {
    let flag = cfg
        .stereotype_flag(&s.true_subclass)
        .ok_or_else(|| DataError::UnknownStereotype(s.true_subclass.clone()))?;
    Ok(s.context.get(flag).copied().unwrap_or(0.0) > 0.5)
}

/// Partitions scenes into (stereotypical, anti-stereotypical).
pub fn split_by_stereotype(
    ds: &Dataset,
    kb: &KnowledgeBase,
) -> Result<(Dataset, Dataset), DataError> {
    let mut stereo = Vec::new();
    let mut anti = Vec::new();
    for s in &ds.scenes {
        if s.masked {
            return Err(DataError::Malformed(format!(
                "scene {} is masked; stereotype split expects unmasked scenes",
                s.id
            )));
        }
        if kb.class_of(&s.true_subclass).is_none() {
            return Err(DataError::UnknownSubclass(s.true_subclass.clone()));
        }
        if is_stereotypical(s, ds.config())? {
            stereo.push(s.clone());
        } else {
            anti.push(s.clone());
        }
    }
    Ok((ds.with_scenes(stereo), ds.with_scenes(anti)))
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `train.jsonl`, `test.jsonl` and `manifest.json` into `dir`.
pub fn save_dataset_dir(
    dir: &Path,
    data: &GeneratedData,
    created_unix: Option<u64>,
) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let mut manifest = data.train.manifest.clone();
    manifest.created_unix = created_unix;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    for (name, ds) in [(TRAIN_FILE, &data.train), (TEST_FILE, &data.test)] {
        let mut out = std::io::BufWriter::new(fs::File::create(dir.join(name))?);
        ds.write_jsonl(&mut out)?;
        out.flush()?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    manifest.config.validate()?;
    Ok(manifest)
}

pub fn load_dataset_dir(dir: &Path) -> Result<GeneratedData, DataError> {
    let manifest = load_manifest(dir)?;
    let open = |name: &str| -> Result<Dataset, DataError> {
        let f = BufReader::new(fs::File::open(dir.join(name))?);
        Dataset::read_jsonl(f, manifest.clone())
    };
    Ok(GeneratedData {
        train: open(TRAIN_FILE)?,
        test: open(TEST_FILE)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, rho: f64) -> GenConfig {
        GenConfig {
            n_train: n,
            n_test: 10,
            bias_rho: rho,
            ..GenConfig::default()
        }
    }

    #[test]
    fn extreme_bias_is_deterministic() {
        let mut cfg = small(400, 1.0);
        cfg.classes = vec![spec(
            "person",
            &["sits"],
            &[("senior", "bench"), ("boy", "skateboard")],
        )];
        cfg.context_dim = 2;
        cfg.evidence_dim = 2;
        let data = generate_dataset(&cfg).unwrap();
        let bench = cfg
            .context_flags()
            .iter()
            .position(|f| *f == "bench")
            .unwrap();
        for s in &data.train.scenes {
            match s.true_subclass.as_str() {
                "senior" => assert_eq!(s.context[bench], 1.0),
                "boy" => assert_eq!(s.context[bench], 0.0),
                other => panic!("unexpected {other}"),
            }
        }
    }

    #[test]
    fn same_config_same_bytes() {
        let cfg = small(200, 0.8);
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.train.write_jsonl(&mut x).unwrap();
        b.train.write_jsonl(&mut y).unwrap();
        assert_eq!(x, y);
        assert_eq!(a, b);
    }

    #[test]
    fn scene_invariants_hold() {
        let data = generate_dataset(&small(300, 0.9)).unwrap();
        data.train.check().unwrap();
        data.test.check().unwrap();
        assert_eq!(data.test.scenes[0].id, 300);
        for s in &data.train.scenes {
            assert_eq!(s.evidence.iter().filter(|&&e| e == 1.0).count(), 1);
            assert_eq!(s.caption[0], ARTICLE);
        }
    }

    #[test]
    fn masking_zeroes_only_evidence() {
        let s = Scene {
            id: 7,
            context: vec![1.0, 0.0],
            evidence: vec![0.9, 0.1],
            masked: false,
            caption: vec!["a".into(), "senior".into(), "sits".into()],
            true_subclass: "senior".into(),
        };
        let m = mask_scene(&s).unwrap();
        assert_eq!(m.evidence, vec![0.0, 0.0]);
        assert_eq!(m.context, vec![1.0, 0.0]);
        assert_eq!(m.caption, s.caption);
        assert!(m.masked);
        assert!(matches!(mask_scene(&m), Err(DataError::AlreadyMasked(7))));
        let mean = mask_scene_with(&s, MaskFill::Mean).unwrap();
        assert_eq!(mean.evidence, vec![0.5, 0.5]);
    }

    #[test]
    fn invalid_configs_named() {
        let mut cfg = small(10, 1.5);
        assert!(
            matches!(cfg.validate(), Err(DataError::InvalidConfig(m)) if m.contains("bias_rho"))
        );
        cfg.bias_rho = 0.5;
        cfg.evidence_dim = 3;
        assert!(
            matches!(cfg.validate(), Err(DataError::InvalidConfig(m)) if m.contains("evidence_dim"))
        );
        cfg.evidence_dim = 9;
        cfg.n_test = 0;
        assert!(matches!(cfg.validate(), Err(DataError::InvalidConfig(m)) if m.contains("n_test")));
    }

    #[test]
    fn stereotype_split_by_definition() {
        let data = generate_dataset(&small(50, 0.9)).unwrap();
        let cfg = data.train.config().clone();
        let bench = cfg.stereotype_flag("senior").unwrap();
        let mut s = data.train.scenes[0].clone();
        s.true_subclass = "senior".into();
        s.context = vec![0.0; cfg.context_dim];
        s.context[bench] = 1.0;
        assert!(is_stereotypical(&s, &cfg).unwrap());
        s.context[bench] = 0.0;
        assert!(!is_stereotypical(&s, &cfg).unwrap());
    }

    #[test]
    fn kb_corpus_adds_class_rewrites() {
        let data = generate_dataset(&small(5, 0.9)).unwrap();
        let corpus = data.train.kb_corpus();
        assert_eq!(corpus.len(), 10);
        let class = data
            .train
            .config()
            .class_of(&data.train.scenes[0].true_subclass)
            .unwrap();
        assert_eq!(corpus[1][1], class);
    }
}
