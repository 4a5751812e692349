//! Seeded generator for a small compositional knowledge graph whose facts
//! are inferable from entity text.
//!
//! Each specimen entity carries one attribute per family (color, animal,
//! habitat, …) spelled out in its description, and one triple per family
//! links it to that attribute's totem entity. A bi-encoder can therefore
//! solve held-out triples by aligning attribute words between the query and
//! candidate descriptions.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FAMILIES: [(&str, &[&str]); 8] = [
    (
        "color",
        &["crimson", "azure", "amber", "emerald", "violet", "ivory", "obsidian", "coral"],
    ),
    (
        "animal",
        &["wolf", "heron", "otter", "lynx", "viper", "bison", "falcon", "beetle"],
    ),
    (
        "habitat",
        &["forest", "reef", "tundra", "dunes", "marsh", "canyon", "cavern", "prairie"],
    ),
    (
        "diet",
        &["berries", "minnows", "roots", "crickets", "clover", "nectar", "acorns", "barley"],
    ),
    (
        "element",
        &["ember", "frost", "gale", "granite", "mist", "spark", "tide", "thunder"],
    ),
    (
        "craft",
        &["weaving", "carving", "smithing", "brewing", "fletching", "masonry", "pottery", "tanning"],
    ),
    (
        "mood",
        &["serene", "fierce", "wistful", "jovial", "solemn", "restless", "gentle", "cunning"],
    ),
    (
        "gem",
        &["opal", "garnet", "topaz", "jade", "onyx", "beryl", "quartz", "pearl"],
    ),
];

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    /// Number of specimen entities (totems come on top).
    pub specimens: usize,
    /// Attribute values drawn per family (≤ 8).
    pub values_per_family: usize,
    /// Of the 8 facts per specimen: how many land in train and valid
    /// (the rest go to test).
    pub train_facts: usize,
    pub valid_facts: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            specimens: 96,
            values_per_family: 6,
            train_facts: 5,
            valid_facts: 1,
        }
    }
}

#[derive(Debug)]
pub struct SyntheticDataset {
    /// (key, name, description)
    pub entities: Vec<(String, String, String)>,
    /// (head key, relation key, tail key) per split
    pub train: Vec<(String, String, String)>,
    pub valid: Vec<(String, String, String)>,
    pub test: Vec<(String, String, String)>,
}

impl SyntheticDataset {
    pub fn num_relations(&self) -> usize {
        FAMILIES.len()
    }
}

/// Deterministically generates the dataset for a seed.
pub fn generate(config: &SyntheticConfig, seed: u64) -> SyntheticDataset {
    assert!(
        config.values_per_family >= 2 && config.values_per_family <= 8,
        "values_per_family must be in 2..=8"
    );
    assert!(
        config.train_facts + config.valid_facts <= FAMILIES.len(),
        "split sizes exceed facts per specimen"
    );
    assert!(config.train_facts >= 1, "every specimen needs a train fact");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut entities = Vec::new();
    for (family, values) in FAMILIES {
        for value in values.iter().take(config.values_per_family) {
            entities.push((
                format!("totem_{family}_{value}"),
                format!("{value} totem"),
                format!("the {family} totem honored by every {value} creature"),
            ));
        }
    }

    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for i in 0..config.specimens {
        let key = format!("specimen_{i:03}");
        let name = format!("specimen {i:03}");
        let mut picks = Vec::with_capacity(FAMILIES.len());
        for (_, values) in FAMILIES {
            let v = values[..config.values_per_family]
                .choose(&mut rng)
                .expect("non-empty family");
            picks.push(*v);
        }
        let description = format!(
            "a {} {} {} dwelling in the {}, feeding on {}, attuned to {}, devoted to {}, bearing a {} charm",
            picks[6], picks[0], picks[1], picks[2], picks[3], picks[4], picks[5], picks[7],
        );
        entities.push((key.clone(), name, description));

        let mut order: Vec<usize> = (0..FAMILIES.len()).collect();
        order.shuffle(&mut rng);
        for (slot, &family_idx) in order.iter().enumerate() {
            let (family, _) = FAMILIES[family_idx];
            let triple = (
                key.clone(),
                format!("has_{family}"),
                format!("totem_{family}_{}", picks[family_idx]),
            );
            if slot < config.train_facts {
                train.push(triple);
            } else if slot < config.train_facts + config.valid_facts {
                valid.push(triple);
            } else {
                test.push(triple);
            }
        }
    }

    SyntheticDataset {
        entities,
        train,
        valid,
        test,
    }
}

fn triples_tsv(triples: &[(String, String, String)]) -> String {
    let mut out = String::new();
    for (h, r, t) in triples {
        let _ = writeln!(out, "{h}\t{r}\t{t}");
    }
    out
}

/// Writes `train.tsv`, `valid.tsv`, `test.tsv`, and `descriptions.json`
/// under `dir` (created if missing).
pub fn write_files(dataset: &SyntheticDataset, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("train.tsv"), triples_tsv(&dataset.train))?;
    fs::write(dir.join("valid.tsv"), triples_tsv(&dataset.valid))?;
    fs::write(dir.join("test.tsv"), triples_tsv(&dataset.test))?;

    let mut map = serde_json::Map::new();
    for (key, name, description) in &dataset.entities {
        let mut entry = serde_json::Map::new();
        entry.insert("name".into(), serde_json::Value::String(name.clone()));
        entry.insert(
            "description".into(),
            serde_json::Value::String(description.clone()),
        );
        map.insert(key.clone(), serde_json::Value::Object(entry));
    }
    let json = serde_json::to_string_pretty(&serde_json::Value::Object(map))?;
    fs::write(dir.join("descriptions.json"), json)?;
    Ok(())
}

/// Generates and writes in one step, returning the dataset for inspection.
pub fn generate_files(
    config: &SyntheticConfig,
    seed: u64,
    dir: &Path,
) -> io::Result<SyntheticDataset> {
    let dataset = generate(config, seed);
    write_files(&dataset, dir)?;
    Ok(dataset)
}
