//! Knowledge graph loading, inverse-triple augmentation, and the
//! known-tail index behind filtered ranking.
//!
//! Triple files are UTF-8 text with one `head \t relation \t tail` line per
//! fact. Entity text comes from a companion descriptions file, either a JSON
//! object keyed by entity identifier or a `id \t name \t description` TSV.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type EntityId = usize;
pub type RelationId = usize;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed line, expected 3 non-empty tab-separated fields")]
    MalformedLine { path: PathBuf, line: usize },
    #[error("{path}:{line}: entity `{key}` has no description entry and never appears in train")]
    UnknownEntity {
        path: PathBuf,
        line: usize,
        key: String,
    },
    #[error("descriptions file {path}: {message}")]
    BadDescriptions { path: PathBuf, message: String },
    #[error("graph already contains inverse relations")]
    AlreadyAugmented,
    #[error("graph invariant violated: {0}")]
    Invariant(String),
}

/// One fact, with dense ids into the graph's entity and relation tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EntityInfo {
    /// Raw identifier from the input files.
    pub key: String,
    pub name: String,
    pub description: String,
    /// True when the entity never appears in a train triple.
    pub unseen: bool,
}

#[derive(Debug, Clone)]
pub struct RelationInfo {
    pub key: String,
    pub name: String,
    /// True for relations added by [`add_inverse_triples`].
    pub inverse: bool,
}

/// Entities, relations, and per-split triples with dense contiguous ids.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    pub entities: Vec<EntityInfo>,
    pub relations: Vec<RelationInfo>,
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
    pub augmented: bool,
    entity_index: HashMap<String, EntityId>,
    relation_index: HashMap<String, RelationId>,
}

impl KnowledgeGraph {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    /// Relation count before inverse augmentation.
    pub fn original_relation_count(&self) -> usize {
        if self.augmented {
            self.relations.len() / 2
        } else {
            self.relations.len()
        }
    }

    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn entity_id(&self, key: &str) -> Option<EntityId> {
        self.entity_index.get(key).copied()
    }

    pub fn relation_id(&self, key: &str) -> Option<RelationId> {
        self.relation_index.get(key).copied()
    }

    /// Checks id ranges and per-split uniqueness.
    pub fn validate(&self) -> Result<(), KgError> {
        for split in Split::ALL {
            let triples = self.split(split);
            let mut seen = HashSet::with_capacity(triples.len());
            for t in triples {
                if t.head >= self.entities.len() || t.tail >= self.entities.len() {
                    return Err(KgError::Invariant(format!(
                        "{} triple references entity id out of range",
                        split.name()
                    )));
                }
                if t.relation >= self.relations.len() {
                    return Err(KgError::Invariant(format!(
                        "{} triple references relation id out of range",
                        split.name()
                    )));
                }
                if !seen.insert(*t) {
                    return Err(KgError::Invariant(format!(
                        "duplicate triple in {}",
                        split.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DescEntry {
    name: String,
    description: String,
}

fn read_to_string(path: &Path) -> Result<String, KgError> {
    fs::read_to_string(path).map_err(|source| KgError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_descriptions(path: &Path) -> Result<HashMap<String, DescEntry>, KgError> {
    let raw = read_to_string(path)?;
    let trimmed = raw.trim_start();
    let mut out = HashMap::new();
    if trimmed.starts_with('{') {
        let value: serde_json::Value =
            serde_json::from_str(&raw).map_err(|e| KgError::BadDescriptions {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        let object = value.as_object().ok_or_else(|| KgError::BadDescriptions {
            path: path.to_path_buf(),
            message: "top-level JSON value must be an object".into(),
        })?;
        for (key, entry) in object {
            let (name, description) = match entry {
                serde_json::Value::Object(fields) => {
                    let name = fields
                        .get("name")
                        .and_then(|v| v.as_str())
                        .unwrap_or(key)
                        .to_string();
                    let description = fields
                        .get("description")
                        .and_then(|v| v.as_str())
                        .unwrap_or("")
                        .to_string();
                    (name, description)
                }
                serde_json::Value::String(s) => (key.clone(), s.clone()),
                _ => {
                    return Err(KgError::BadDescriptions {
                        path: path.to_path_buf(),
                        message: format!("entry for `{key}` must be an object or string"),
                    })
                }
            };
            out.insert(key.clone(), DescEntry { name, description });
        }
    } else {
        for (idx, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.splitn(3, '\t');
            let key = fields.next().unwrap_or("").trim();
            let name = fields.next().map(str::trim);
            let description = fields.next().map(str::trim).unwrap_or("");
            let (Some(name), false) = (name, key.is_empty()) else {
                return Err(KgError::BadDescriptions {
                    path: path.to_path_buf(),
                    message: format!("line {}: expected at least 2 tab-separated fields", idx + 1),
                });
            };
            out.insert(
                key.to_string(),
                DescEntry {
                    name: name.to_string(),
                    description: description.to_string(),
                },
            );
        }
    }
    Ok(out)
}

struct RawTriple {
    head: String,
    relation: String,
    tail: String,
    line: usize,
}

fn parse_triple_file(path: &Path) -> Result<Vec<RawTriple>, KgError> {
    let raw = read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            return Err(KgError::MalformedLine {
                path: path.to_path_buf(),
                line: idx + 1,
            });
        }
        out.push(RawTriple {
            head: fields[0].to_string(),
            relation: fields[1].to_string(),
            tail: fields[2].to_string(),
            line: idx + 1,
        });
    }
    Ok(out)
}

/// Relation display text: the identifier with underscores as spaces.
fn relation_name_from_key(key: &str) -> String {
    key.replace('_', " ").trim().to_string()
}

/// Loads the three triple splits plus the entity descriptions file.
///
/// Dense ids are assigned in first-seen order over train, then valid, then
/// test, so repeated loads of the same files produce identical graphs.
/// Entities without a description entry fall back to their name; train-side
/// entities may be missing from the descriptions file entirely, while
/// valid/test-only entities must have one. Duplicate triples within a split
/// are dropped with a warning.
pub fn load_graph(
    train_path: &Path,
    valid_path: &Path,
    test_path: &Path,
    descriptions_path: &Path,
) -> Result<KnowledgeGraph, KgError> {
    let descriptions = parse_descriptions(descriptions_path)?;

    let mut entities: Vec<EntityInfo> = Vec::new();
    let mut relations: Vec<RelationInfo> = Vec::new();
    let mut entity_index: HashMap<String, EntityId> = HashMap::new();
    let mut relation_index: HashMap<String, RelationId> = HashMap::new();
    let mut splits: [Vec<Triple>; 3] = [Vec::new(), Vec::new(), Vec::new()];

    for (split_idx, path) in [train_path, valid_path, test_path].into_iter().enumerate() {
        let raw_triples = parse_triple_file(path)?;
        let in_train = split_idx == 0;
        let mut seen: HashSet<Triple> = HashSet::with_capacity(raw_triples.len());
        let mut dropped = 0usize;
        for raw in raw_triples {
            let mut intern_entity = |key: &str, line: usize| -> Result<EntityId, KgError> {
                if let Some(&id) = entity_index.get(key) {
                    if in_train {
                        entities[id].unseen = false;
                    }
                    return Ok(id);
                }
                let entry = descriptions.get(key);
                if entry.is_none() && !in_train {
                    return Err(KgError::UnknownEntity {
                        path: path.to_path_buf(),
                        line,
                        key: key.to_string(),
                    });
                }
                let name = entry
                    .map(|e| e.name.clone())
                    .filter(|n| !n.is_empty())
                    .unwrap_or_else(|| key.to_string());
                let description = entry
                    .map(|e| e.description.clone())
                    .filter(|d| !d.is_empty())
                    .unwrap_or_else(|| name.clone());
                let id = entities.len();
                entities.push(EntityInfo {
                    key: key.to_string(),
                    name,
                    description,
                    unseen: !in_train,
                });
                entity_index.insert(key.to_string(), id);
                Ok(id)
            };

            let head = intern_entity(&raw.head, raw.line)?;
            let tail = intern_entity(&raw.tail, raw.line)?;
            let relation = match relation_index.get(&raw.relation) {
                Some(&id) => id,
                None => {
                    let id = relations.len();
                    relations.push(RelationInfo {
                        key: raw.relation.clone(),
                        name: relation_name_from_key(&raw.relation),
                        inverse: false,
                    });
                    relation_index.insert(raw.relation.clone(), id);
                    id
                }
            };

            let triple = Triple {
                head,
                relation,
                tail,
            };
            if seen.insert(triple) {
                splits[split_idx].push(triple);
            } else {
                dropped += 1;
            }
        }
        if dropped > 0 {
            log::warn!(
                "{}: dropped {dropped} duplicate triple(s)",
                path.display()
            );
        }
    }

    let [train, valid, test] = splits;
    let unseen = entities.iter().filter(|e| e.unseen).count();
    if unseen > 0 {
        log::info!("{unseen} entities appear only in valid/test");
    }
    log::info!(
        "loaded graph: {} entities, {} relations, {}/{}/{} train/valid/test triples",
        entities.len(),
        relations.len(),
        train.len(),
        valid.len(),
        test.len()
    );

    let graph = KnowledgeGraph {
        entities,
        relations,
        train,
        valid,
        test,
        augmented: false,
        entity_index,
        relation_index,
    };
    graph.validate()?;
    Ok(graph)
}

/// Doubles the relation set and adds one reversed triple per fact, so head
/// prediction can be evaluated as tail prediction over reversed queries.
pub fn add_inverse_triples(mut graph: KnowledgeGraph) -> Result<KnowledgeGraph, KgError> {
    if graph.augmented {
        return Err(KgError::AlreadyAugmented);
    }
    let base = graph.relations.len();
    for r in 0..base {
        let key = format!("inverse:{}", graph.relations[r].key);
        let name = format!("inverse {}", graph.relations[r].name);
        graph.relation_index.insert(key.clone(), base + r);
        graph.relations.push(RelationInfo {
            key,
            name,
            inverse: true,
        });
    }
    for split in [&mut graph.train, &mut graph.valid, &mut graph.test] {
        let originals = split.len();
        split.reserve(originals);
        for i in 0..originals {
            let t = split[i];
            split.push(Triple {
                head: t.tail,
                relation: t.relation + base,
                tail: t.head,
            });
        }
    }
    graph.augmented = true;
    graph.validate()?;
    Ok(graph)
}

/// All tails known true for each (head, relation) pair, across every split.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    map: HashMap<(EntityId, RelationId), HashSet<EntityId>>,
}

impl FilterIndex {
    pub fn tails(&self, head: EntityId, relation: RelationId) -> Option<&HashSet<EntityId>> {
        self.map.get(&(head, relation))
    }

    pub fn contains(&self, head: EntityId, relation: RelationId, tail: EntityId) -> bool {
        self.map
            .get(&(head, relation))
            .is_some_and(|set| set.contains(&tail))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Builds the known-tail index over train, valid, and test together.
pub fn build_filter_index(graph: &KnowledgeGraph) -> FilterIndex {
    let mut map: HashMap<(EntityId, RelationId), HashSet<EntityId>> = HashMap::new();
    for split in Split::ALL {
        for t in graph.split(split) {
            map.entry((t.head, t.relation)).or_default().insert(t.tail);
        }
    }
    FilterIndex { map }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::TempDir;

    pub(crate) fn write_file(dir: &TempDir, name: &str, contents: &str) -> PathBuf {
        let path = dir.path().join(name);
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        path
    }

    fn toy_graph(train: &str, valid: &str, test: &str, desc: &str) -> Result<KnowledgeGraph, KgError> {
        let dir = TempDir::new().unwrap();
        let train = write_file(&dir, "train.tsv", train);
        let valid = write_file(&dir, "valid.tsv", valid);
        let test = write_file(&dir, "test.tsv", test);
        let desc = write_file(&dir, "desc.json", desc);
        load_graph(&train, &valid, &test, &desc)
    }

    const DESC: &str = r#"{
        "a": {"name": "alpha", "description": "first letter"},
        "b": {"name": "beta", "description": "second letter"},
        "c": {"name": "gamma", "description": "third letter"}
    }"#;

    #[test]
    fn three_line_train_two_entities() {
        let g = toy_graph("a\tr\tb\nb\tr\ta\na\ts\tb\n", "", "", DESC).unwrap();
        assert_eq!(g.num_entities(), 2);
        assert_eq!(g.num_relations(), 2);
        assert_eq!((g.train.len(), g.valid.len(), g.test.len()), (3, 0, 0));
    }

    #[test]
    fn duplicate_train_triple_dropped() {
        let g = toy_graph("a\tr\tb\na\tr\tb\nb\tr\ta\n", "", "", DESC).unwrap();
        assert_eq!(g.train.len(), 2);
    }

    #[test]
    fn malformed_line_reports_file_and_line() {
        let err = toy_graph("a\tr\tb\na\tb\n", "", "", DESC).unwrap_err();
        match err {
            KgError::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn ids_assigned_first_seen_train_then_valid_then_test() {
        let g = toy_graph("a\tr\tb\n", "b\tr\tc\n", "c\tr\ta\n", DESC).unwrap();
        assert_eq!(g.entity_id("a"), Some(0));
        assert_eq!(g.entity_id("b"), Some(1));
        assert_eq!(g.entity_id("c"), Some(2));
        // round-trip through the id ↔ key maps
        for (id, info) in g.entities.iter().enumerate() {
            assert_eq!(g.entity_id(&info.key), Some(id));
        }
        for (id, info) in g.relations.iter().enumerate() {
            assert_eq!(g.relation_id(&info.key), Some(id));
        }
    }

    #[test]
    fn valid_only_entity_without_description_is_an_error() {
        let err = toy_graph("a\tr\tb\n", "a\tr\tzz\n", "", DESC).unwrap_err();
        match err {
            KgError::UnknownEntity { key, line, .. } => {
                assert_eq!(key, "zz");
                assert_eq!(line, 1);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn test_only_entity_with_description_is_flagged() {
        let g = toy_graph("a\tr\tb\n", "", "a\tr\tc\n", DESC).unwrap();
        let c = g.entity_id("c").unwrap();
        assert!(g.entities[c].unseen);
        assert!(!g.entities[g.entity_id("a").unwrap()].unseen);
    }

    #[test]
    fn missing_description_falls_back_to_name() {
        let g = toy_graph("x\tr\ty\n", "", "", r#"{"x": {"name": "ex"}}"#).unwrap();
        let x = g.entity_id("x").unwrap();
        assert_eq!(g.entities[x].name, "ex");
        assert_eq!(g.entities[x].description, "ex");
        let y = g.entity_id("y").unwrap();
        assert_eq!(g.entities[y].name, "y");
        assert_eq!(g.entities[y].description, "y");
    }

    #[test]
    fn tsv_descriptions_accepted() {
        let dir = TempDir::new().unwrap();
        let train = write_file(&dir, "train.tsv", "a\tr\tb\n");
        let valid = write_file(&dir, "valid.tsv", "");
        let test = write_file(&dir, "test.tsv", "");
        let desc = write_file(&dir, "desc.tsv", "a\talpha\tfirst letter\nb\tbeta\tsecond letter\n");
        let g = load_graph(&train, &valid, &test, &desc).unwrap();
        assert_eq!(g.entities[0].name, "alpha");
        assert_eq!(g.entities[0].description, "first letter");
    }

    #[test]
    fn augmentation_doubles_counts_and_reverses() {
        let g = toy_graph("a\tr\tb\nb\tr\tc\nc\ts\ta\n", "a\ts\tc\n", "", DESC).unwrap();
        let base_relations = g.num_relations();
        let n_train = g.train.len();
        let g = add_inverse_triples(g).unwrap();
        assert_eq!(g.num_relations(), 2 * base_relations);
        assert_eq!(g.train.len(), 2 * n_train);
        assert_eq!(g.valid.len(), 2);
        // (h, r, t) implies (t, r + R, h)
        for i in 0..n_train {
            let t = g.train[i];
            let inv = g.train[n_train + i];
            assert_eq!(
                (inv.head, inv.relation, inv.tail),
                (t.tail, t.relation + base_relations, t.head)
            );
        }
        assert!(g.relations[base_relations].inverse);
        assert!(g.relations[base_relations].name.starts_with("inverse "));
    }

    #[test]
    fn augmenting_twice_fails() {
        let g = toy_graph("a\tr\tb\n", "", "", DESC).unwrap();
        let g = add_inverse_triples(g).unwrap();
        assert!(matches!(
            add_inverse_triples(g),
            Err(KgError::AlreadyAugmented)
        ));
    }

    #[test]
    fn filter_index_single_and_shared_keys() {
        let g = toy_graph("a\tr\tb\n", "", "", DESC).unwrap();
        let idx = build_filter_index(&g);
        assert_eq!(idx.tails(0, 0).unwrap().len(), 1);
        assert!(idx.contains(0, 0, 1));

        let g2 = toy_graph("a\tr\tb\na\tr\tc\n", "", "", DESC).unwrap();
        let idx2 = build_filter_index(&g2);
        assert_eq!(idx2.len(), 1);
        assert_eq!(idx2.tails(0, 0).unwrap().len(), 2);
    }

    #[test]
    fn filter_index_matches_brute_force_on_random_graph() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut lines = String::new();
        let mut raw = Vec::new();
        for _ in 0..50 {
            let h = rng.random_range(0..8u32);
            let r = rng.random_range(0..3u32);
            let t = rng.random_range(0..8u32);
            lines.push_str(&format!("e{h}\trel{r}\te{t}\n"));
            raw.push((format!("e{h}"), format!("rel{r}"), format!("e{t}")));
        }
        let mut desc = String::from("{");
        for i in 0..8 {
            if i > 0 {
                desc.push(',');
            }
            desc.push_str(&format!(r#""e{i}": {{"name": "entity {i}"}}"#));
        }
        desc.push('}');
        let g = toy_graph(&lines, "", "", &desc).unwrap();
        let g = add_inverse_triples(g).unwrap();
        let idx = build_filter_index(&g);

        // brute-force scan over every triple in every split
        for split in Split::ALL {
            for t in g.split(split) {
                assert!(idx.contains(t.head, t.relation, t.tail));
            }
        }
        // and the reverse: every indexed tail is backed by some triple
        for e in 0..g.num_entities() {
            for r in 0..g.num_relations() {
                if let Some(tails) = idx.tails(e, r) {
                    for &tail in tails {
                        let found = Split::ALL.iter().any(|&s| {
                            g.split(s).iter().any(|t| {
                                t.head == e && t.relation == r && t.tail == tail
                            })
                        });
                        assert!(found, "indexed tail without backing triple");
                    }
                }
            }
        }
    }
}
