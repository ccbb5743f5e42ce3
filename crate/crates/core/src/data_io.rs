//! Dataset files, the synthetic product-catalog generator and `key = value`
//! config files.
//!
//! A dataset directory holds `labels.jsonl` (`{"id", "text"}` per line),
//! `queries.jsonl` for training and `test_queries.jsonl` for evaluation
//! (both `{"id", "text", "labels": [...]}` per line).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TextRecord;
use crate::mining::Dataset;
use crate::trainer::TrainConfig;

pub const LABELS_FILE: &str = "labels.jsonl";
pub const TRAIN_QUERIES_FILE: &str = "queries.jsonl";
pub const TEST_QUERIES_FILE: &str = "test_queries.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
    #[error("invalid dataset: id {id}: {message}")]
    Validation { id: u64, message: String },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("{file}:{line}: {message}")]
    Config {
        file: String,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to a temporary sibling of `path`, syncs it and renames
/// it into place, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().ok_or_else(|| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name")
    })?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: u64,
    pub text: String,
    pub labels: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => TRAIN_QUERIES_FILE,
            Split::Test => TEST_QUERIES_FILE,
        }
    }
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| DataError::Parse {
            file: file.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Checks the dataset invariants and converts label ids to positions.
/// Labels end up sorted by id; query order is kept.
pub fn build_dataset(
    mut labels: Vec<TextRecord>,
    queries: Vec<QueryRecord>,
) -> Result<Dataset, DataError> {
    labels.sort_by_key(|l| l.id);
    if let Some(w) = labels.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(DataError::Validation {
            id: w[0].id,
            message: "duplicate label id".into(),
        });
    }
    let position: HashMap<u64, usize> = labels.iter().enumerate().map(|(i, l)| (l.id, i)).collect();
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(queries.len());
    let mut positives = Vec::with_capacity(queries.len());
    for q in queries {
        if !seen.insert(q.id) {
            return Err(DataError::Validation {
                id: q.id,
                message: "duplicate query id".into(),
            });
        }
        if q.labels.is_empty() {
            return Err(DataError::Validation {
                id: q.id,
                message: "query has no positive labels".into(),
            });
        }
        let mut set = Vec::with_capacity(q.labels.len());
        for l in &q.labels {
            match position.get(l) {
                Some(&p) => set.push(p),
                None => {
                    return Err(DataError::Validation {
                        id: q.id,
                        message: format!("query references missing label {l}"),
                    })
                }
            }
        }
        set.sort_unstable();
        set.dedup();
        positives.push(set);
        records.push(TextRecord {
            id: q.id,
            text: q.text,
        });
    }
    Ok(Dataset {
        labels,
        queries: records,
        positives,
    })
}

/// Loads the labels and one query split from `dir`.
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset, DataError> {
    let labels: Vec<TextRecord> = parse_jsonl(&dir.join(LABELS_FILE))?;
    let queries: Vec<QueryRecord> = parse_jsonl(&dir.join(split.file_name()))?;
    build_dataset(labels, queries)
}

/// Loads the training split.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    load_split(dir, Split::Train)
}

/// Renders labels and queries in the on-disk JSONL layout.
pub fn to_jsonl<T: Serialize>(records: &[T]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

/// Parameters of the synthetic product catalog.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_labels: usize,
    pub num_train_queries: usize,
    pub num_test_queries: usize,
    pub families: usize,
    /// Per-character corruption probability.
    pub noise_rate: f64,
    /// Per-word abbreviation probability.
    pub abbreviation_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_labels: 200,
            num_train_queries: 2000,
            num_test_queries: 500,
            families: 20,
            noise_rate: 0.1,
            abbreviation_rate: 0.4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.families < 2 {
            return bad(format!("need at least 2 families, got {}", self.families));
        }
        if self.num_labels < self.families {
            return bad(format!(
                "num_labels ({}) must be at least families ({})",
                self.num_labels, self.families
            ));
        }
        for (name, r) in [
            ("noise_rate", self.noise_rate),
            ("abbreviation_rate", self.abbreviation_rate),
        ] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} must be in [0, 1), got {r}"));
            }
        }
        if self.num_train_queries == 0 && self.num_test_queries == 0 {
            return bad("no queries requested".into());
        }
        Ok(())
    }
}

const BRANDS: &[&str] = &[
    "Oakridge",
    "Brightwell",
    "Northpeak",
    "Silverleaf",
    "Harbor",
    "Crestline",
    "Maplewood",
    "Sunfield",
    "Bluestone",
    "Redfern",
    "Kingsley",
    "Willowby",
    "Ironbark",
    "Goldcrest",
    "Pinehurst",
    "Lakeview",
    "Stonebridge",
    "Ashford",
    "Fairmont",
    "Westbrook",
    "Clearwater",
    "Riverton",
    "Highland",
    "Evergreen",
];

const CATEGORIES: &[&str] = &[
    "sandwich cookies",
    "potato chips",
    "granola bars",
    "instant coffee",
    "green tea",
    "pasta sauce",
    "laundry detergent",
    "dish soap",
    "paper towels",
    "shampoo",
    "toothpaste",
    "peanut butter",
    "breakfast cereal",
    "sparkling water",
    "dark chocolate",
    "hand soap",
];

const VARIANTS: &[&str] = &[
    "original",
    "vanilla",
    "chocolate",
    "strawberry",
    "peanut butter",
    "honey",
    "mint",
    "lemon",
    "unscented",
    "lavender",
    "extra strength",
    "light",
    "classic",
    "family size",
    "sea salt",
    "double stuf",
    "whole grain",
    "sugar free",
    "caramel",
    "coconut",
    "cinnamon",
    "berry blast",
    "fresh scent",
    "sensitive",
];

const UNITS: &[(&str, &[&str])] = &[
    ("oz", &["oz", "ounce", "onz"]),
    ("lb", &["lb", "lbs", "pound"]),
    ("ml", &["ml", "mls", "milliliter"]),
    ("ct", &["ct", "count", "cnt"]),
    ("pk", &["pk", "pack", "pck"]),
];

const SIZES: &[u32] = &[4, 6, 8, 10, 12, 14, 16, 17, 20, 24, 32, 48, 64];

struct Family {
    brand: String,
    category: &'static str,
    unit: usize,
}

fn families<R: Rng>(n: usize, rng: &mut R) -> Vec<Family> {
    let mut brands: Vec<String> = BRANDS.iter().map(|b| b.to_string()).collect();
    brands.shuffle(rng);
    (0..n)
        .map(|f| {
            let base = &brands[f % brands.len()];
            let brand = if f < brands.len() {
                base.clone()
            } else {
                format!(
                    "{base} {}",
                    ["co", "pro", "max", "plus", "select"][(f / brands.len() - 1) % 5]
                )
            };
            Family {
                brand,
                category: CATEGORIES[rng.random_range(0..CATEGORIES.len())],
                unit: rng.random_range(0..UNITS.len()),
            }
        })
        .collect()
}

/// Drops every vowel after the first letter: "cookies" → "cks".
fn elide_vowels(word: &str) -> String {
    let mut chars = word.chars();
    let first = chars.next().map(String::from).unwrap_or_default();
    let rest: String = chars.filter(|c| !"aeiou".contains(*c)).collect();
    first + &rest
}

fn abbreviate<R: Rng>(word: &str, rng: &mut R) -> String {
    if word.chars().count() <= 3 || word.chars().any(|c| c.is_ascii_digit()) {
        return word.to_string();
    }
    match rng.random_range(0..3) {
        0 => elide_vowels(word),
        1 => word.chars().take(rng.random_range(3..=4)).collect(),
        _ => {
            let e = elide_vowels(word);
            e.chars().take(4.max(e.chars().count() / 2 + 1)).collect()
        }
    }
}

fn corrupt_chars<R: Rng>(word: &str, rate: f64, rng: &mut R) -> String {
    const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
    let chars: Vec<char> = word.chars().collect();
    let mut out = String::with_capacity(chars.len());
    let mut i = 0;
    while i < chars.len() {
        if rate > 0.0 && rng.random_bool(rate) {
            match rng.random_range(0..3) {
                // drop
                0 => {}
                // substitute
                1 => out.push(LETTERS[rng.random_range(0..LETTERS.len())] as char),
                // swap with the next char
                _ => {
                    if i + 1 < chars.len() {
                        out.push(chars[i + 1]);
                        out.push(chars[i]);
                        i += 1;
                    } else {
                        out.push(chars[i]);
                    }
                }
            }
        } else {
            out.push(chars[i]);
        }
        i += 1;
    }
    if out.is_empty() {
        word.chars().take(1).collect()
    } else {
        out
    }
}

/// A noisy, abbreviated rendering of a label in the style of short
/// product search queries.
fn render_query<R: Rng>(label: &str, spec: &SyntheticSpec, rng: &mut R) -> String {
    if spec.noise_rate == 0.0 && spec.abbreviation_rate == 0.0 {
        return label.to_string();
    }
    let words: Vec<&str> = label.split(' ').collect();
    let mut out: Vec<String> = Vec::with_capacity(words.len());
    let mut i = 0;
    while i < words.len() {
        let w = words[i];
        let next_is_unit = words
            .get(i + 1)
            .and_then(|u| UNITS.iter().find(|(base, _)| base == u));
        if let (true, Some((_, spellings))) = (w.chars().all(|c| c.is_ascii_digit()), next_is_unit)
        {
            // size-unit mangling: "17 oz" → "17oz" / "17 ounce" / ...
            let unit = if rng.random_bool(spec.abbreviation_rate) {
                spellings.choose(rng).expect("non-empty")
            } else {
                spellings[0]
            };
            if rng.random_bool(0.5) {
                out.push(format!("{w}{unit}"));
            } else {
                out.push(w.to_string());
                out.push(unit.to_string());
            }
            i += 2;
            continue;
        }
        if spec.abbreviation_rate > 0.0
            && rng.random_bool(spec.abbreviation_rate * 0.25)
            && words.len() > 3
        {
            // incomplete description: the word is left out
            i += 1;
            continue;
        }
        let w = if rng.random_bool(spec.abbreviation_rate) {
            abbreviate(w, rng)
        } else {
            w.to_string()
        };
        out.push(corrupt_chars(&w, spec.noise_rate, rng));
        i += 1;
    }
    if out.is_empty() {
        label.to_string()
    } else {
        out.join(" ")
    }
}

/// The generated catalog, ready to be written out.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub labels: Vec<TextRecord>,
    pub train: Vec<QueryRecord>,
    pub test: Vec<QueryRecord>,
    /// Family of each label, by label id.
    pub label_family: Vec<usize>,
}

/// Generates a catalog of templated product labels grouped in families and
/// noisy queries whose 1–3 positives all come from one family.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fams = families(spec.families, &mut rng);

    let mut labels = Vec::with_capacity(spec.num_labels);
    let mut label_family = Vec::with_capacity(spec.num_labels);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); spec.families];
    let mut used: BTreeSet<String> = BTreeSet::new();
    for id in 0..spec.num_labels {
        let f = id % spec.families;
        let fam = &fams[f];
        let mut text;
        let mut attempts = 0;
        loop {
            let variant = VARIANTS[rng.random_range(0..VARIANTS.len())];
            let size = SIZES[rng.random_range(0..SIZES.len())];
            text = format!(
                "{} {} {} {} {}",
                fam.brand, fam.category, variant, size, UNITS[fam.unit].0
            );
            attempts += 1;
            if used.insert(text.clone()) || attempts > 50 {
                break;
            }
        }
        labels.push(TextRecord {
            id: id as u64,
            text,
        });
        label_family.push(f);
        members[f].push(id);
    }

    let make = |count: usize, first_id: u64, rng: &mut ChaCha8Rng| -> Vec<QueryRecord> {
        (0..count)
            .map(|j| {
                let f = rng.random_range(0..spec.families);
                let pool = &members[f];
                let anchor = *pool.choose(rng).expect("families are non-empty");
                let extra = rng.random_range(0..=2usize).min(pool.len() - 1);
                let mut positives = vec![anchor];
                let others: Vec<usize> = pool.iter().copied().filter(|&l| l != anchor).collect();
                positives.extend(others.choose_multiple(rng, extra));
                positives.sort_unstable();
                QueryRecord {
                    id: first_id + j as u64,
                    text: render_query(&labels[anchor].text, spec, rng),
                    labels: positives.into_iter().map(|l| l as u64).collect(),
                }
            })
            .collect()
    };
    let train = make(spec.num_train_queries, 0, &mut rng);
    let test = make(
        spec.num_test_queries,
        spec.num_train_queries as u64,
        &mut rng,
    );
    Ok(SyntheticData {
        labels,
        train,
        test,
        label_family,
    })
}

/// Writes the three dataset files into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, data: &SyntheticData) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, body) in [
        (LABELS_FILE, to_jsonl(&data.labels)),
        (TRAIN_QUERIES_FILE, to_jsonl(&data.train)),
        (TEST_QUERIES_FILE, to_jsonl(&data.test)),
    ] {
        let path = dir.join(name);
        atomic_write(&path, body.as_bytes()).map_err(io_err(&path))?;
    }
    Ok(())
}

/// One `key = value` entry with its 1-based line number.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits `key = value` lines; `#` starts a comment, blank lines are
/// ignored and a key may appear only once.
pub fn parse_key_values(text: &str, file: &str) -> Result<Vec<ConfigEntry>, DataError> {
    let mut out: Vec<ConfigEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| DataError::Config {
            file: file.to_string(),
            line: i + 1,
            message,
        };
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (k.trim(), v.trim());
        if key.is_empty() {
            return Err(err("empty key".into()));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(err(format!("duplicate key `{key}`")));
        }
        out.push(ConfigEntry {
            line: i + 1,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

fn typed<T: std::str::FromStr>(e: &ConfigEntry, file: &str) -> Result<T, DataError>
where
    T::Err: std::fmt::Display,
{
    e.value.parse().map_err(|err: T::Err| DataError::Config {
        file: file.to_string(),
        line: e.line,
        message: format!("bad value `{}` for `{}`: {err}", e.value, e.key),
    })
}

fn unknown(e: &ConfigEntry, file: &str, known: &[&str]) -> DataError {
    DataError::Config {
        file: file.to_string(),
        line: e.line,
        message: format!("unknown key `{}` (known keys: {})", e.key, known.join(", ")),
    }
}

/// A training run described by a config file. Keys mirror
/// [`TrainConfig`]; `data` and `out` optionally name the dataset and
/// output directories.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub const RUN_CONFIG_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "beta1",
    "beta2",
    "blocking_size",
    "tcm_enabled",
    "m_plus",
    "m_minus",
    "sampler",
    "pool_size",
    "triplet_margin",
    "seed",
    "refresh_cadence",
    "detach_aux",
    "dim",
    "d_in",
    "buckets",
    "dropout",
    "data",
    "out",
];

impl RunConfig {
    /// Parses config text; keys not set keep their defaults.
    pub fn parse(text: &str, file: &str) -> Result<Self, DataError> {
        let mut cfg = RunConfig::default();
        let t = &mut cfg.train;
        for e in parse_key_values(text, file)? {
            match e.key.as_str() {
                "epochs" => t.epochs = typed(&e, file)?,
                "batch_size" => t.batch_size = typed(&e, file)?,
                "learning_rate" => t.learning_rate = typed(&e, file)?,
                "beta1" => t.beta1 = typed(&e, file)?,
                "beta2" => t.beta2 = typed(&e, file)?,
                "blocking_size" => t.blocking_size = typed(&e, file)?,
                "tcm_enabled" => t.tcm_enabled = typed(&e, file)?,
                "m_plus" => t.m_plus = typed(&e, file)?,
                "m_minus" => t.m_minus = typed(&e, file)?,
                "sampler" => t.sampler = typed(&e, file)?,
                "pool_size" => t.pool_size = typed(&e, file)?,
                "triplet_margin" => t.triplet_margin = typed(&e, file)?,
                "seed" => t.seed = typed(&e, file)?,
                "refresh_cadence" => t.refresh_cadence = typed(&e, file)?,
                "detach_aux" => t.detach_aux = typed(&e, file)?,
                "dim" => t.dim = typed(&e, file)?,
                "d_in" => t.d_in = typed(&e, file)?,
                "buckets" => t.buckets = typed(&e, file)?,
                "dropout" => t.dropout = typed(&e, file)?,
                "data" => cfg.data = Some(PathBuf::from(&e.value)),
                "out" => cfg.out = Some(PathBuf::from(&e.value)),
                _ => return Err(unknown(&e, file, RUN_CONFIG_KEYS)),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// The config back in file form; parsing the result gives `self`.
    pub fn render(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("learning_rate", format!("{:?}", t.learning_rate));
        put("beta1", format!("{:?}", t.beta1));
        put("beta2", format!("{:?}", t.beta2));
        put("blocking_size", t.blocking_size.to_string());
        put("tcm_enabled", t.tcm_enabled.to_string());
        put("m_plus", format!("{:?}", t.m_plus));
        put("m_minus", format!("{:?}", t.m_minus));
        put("sampler", t.sampler.to_string());
        put("pool_size", t.pool_size.to_string());
        put("triplet_margin", format!("{:?}", t.triplet_margin));
        put("seed", t.seed.to_string());
        put("refresh_cadence", t.refresh_cadence.to_string());
        put("detach_aux", t.detach_aux.to_string());
        put("dim", t.dim.to_string());
        put("d_in", t.d_in.to_string());
        put("buckets", t.buckets.to_string());
        put("dropout", format!("{:?}", t.dropout));
        if let Some(d) = &self.data {
            put("data", d.display().to_string());
        }
        if let Some(o) = &self.out {
            put("out", o.display().to_string());
        }
        s
    }
}

pub const SPEC_KEYS: &[&str] = &[
    "num_labels",
    "num_train_queries",
    "num_test_queries",
    "families",
    "noise_rate",
    "abbreviation_rate",
    "seed",
];

/// Parses a synthetic-spec file (`key = value`, keys as in [`SPEC_KEYS`]).
pub fn parse_spec(text: &str, file: &str) -> Result<SyntheticSpec, DataError> {
    let mut spec = SyntheticSpec::default();
    for e in parse_key_values(text, file)? {
        match e.key.as_str() {
            "num_labels" => spec.num_labels = typed(&e, file)?,
            "num_train_queries" => spec.num_train_queries = typed(&e, file)?,
            "num_test_queries" => spec.num_test_queries = typed(&e, file)?,
            "families" => spec.families = typed(&e, file)?,
            "noise_rate" => spec.noise_rate = typed(&e, file)?,
            "abbreviation_rate" => spec.abbreviation_rate = typed(&e, file)?,
            "seed" => spec.seed = typed(&e, file)?,
            _ => return Err(unknown(&e, file, SPEC_KEYS)),
        }
    }
    Ok(spec)
}

pub fn load_spec(path: &Path) -> Result<SyntheticSpec, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_spec(&text, &path.display().to_string())
}

/// Family of every label, recovered from a generated catalog, keyed by
/// label id. Used by tests that check the same-family rule.
pub fn family_index(data: &SyntheticData) -> BTreeMap<u64, usize> {
    data.labels
        .iter()
        .zip(&data.label_family)
        .map(|(l, &f)| (l.id, f))
        .collect()
}
