//! Radiology knowledge base: the general topic set, its per-region subsets,
//! tag-driven topic selection and frozen topic embeddings.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// The bundled topic lists (general set plus six region subsets).
pub const BUNDLED_KNOWLEDGE: &str = include_str!("../../../data/knowledge_s4m.json");

/// Body-part condition tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionTag {
    Chest,
    Abdomen,
    Knee,
    Hip,
    Wrist,
    Shoulder,
}

impl RegionTag {
    pub const ALL: [RegionTag; 6] = [
        RegionTag::Chest,
        RegionTag::Abdomen,
        RegionTag::Knee,
        RegionTag::Hip,
        RegionTag::Wrist,
        RegionTag::Shoulder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegionTag::Chest => "chest",
            RegionTag::Abdomen => "abdomen",
            RegionTag::Knee => "knee",
            RegionTag::Hip => "hip",
            RegionTag::Wrist => "wrist",
            RegionTag::Shoulder => "shoulder",
        }
    }

    /// The human-readable condition string, e.g. `"chest X-ray"`.
    pub fn label(self) -> &'static str {
        match self {
            RegionTag::Chest => "chest X-ray",
            RegionTag::Abdomen => "abdomen X-ray",
            RegionTag::Knee => "knee X-ray",
            RegionTag::Hip => "hip X-ray",
            RegionTag::Wrist => "wrist X-ray",
            RegionTag::Shoulder => "shoulder X-ray",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RegionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegionTag {
    type Err = Error;

    /// Accepts `"chest"` or `"chest X-ray"`, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_lowercase();
        let short = norm.strip_suffix(" x-ray").unwrap_or(&norm);
        RegionTag::ALL
            .into_iter()
            .find(|t| t.as_str() == short)
            .ok_or_else(|| Error::UnknownRegionTag(s.to_string()))
    }
}

/// An ordered selection of topics together with their positions in the
/// general set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopicSet {
    pub topics: Vec<String>,
    pub indices: Vec<usize>,
}

impl TopicSet {
    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct KnowledgeFile {
    general: Vec<String>,
    regions: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug)]
pub struct KnowledgeBase {
    general: Vec<String>,
    regions: BTreeMap<RegionTag, Vec<String>>,
    position: HashMap<String, usize>,
}

impl KnowledgeBase {
    /// The lists shipped with the crate.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_KNOWLEDGE).expect("bundled knowledge file is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let file: KnowledgeFile = serde_json::from_str(text)
            .map_err(|e| Error::KnowledgeFormat { line: e.line(), msg: e.to_string() })?;
        let mut position = HashMap::new();
        for (i, t) in file.general.iter().enumerate() {
            if position.insert(t.clone(), i).is_some() {
                return Err(Error::DuplicateTopic(t.clone()));
            }
        }
        let mut regions = BTreeMap::new();
        let mut missing = Vec::new();
        for (name, topics) in file.regions {
            let tag: RegionTag = name.parse()?;
            let mut seen = HashSet::new();
            for t in &topics {
                if !seen.insert(t) {
                    return Err(Error::DuplicateTopic(format!("{t} (in {tag})")));
                }
                if !position.contains_key(t) {
                    missing.push(t.clone());
                }
            }
            regions.insert(tag, topics);
        }
        if !missing.is_empty() {
            missing.sort();
            missing.dedup();
            return Err(Error::TopicsNotInGeneral(missing));
        }
        for tag in RegionTag::ALL {
            if !regions.contains_key(&tag) {
                return Err(Error::KnowledgeFormat { line: 0, msg: format!("no topic list for region {tag}") });
            }
        }
        let covered: HashSet<&String> = regions.values().flatten().collect();
        let uncovered: Vec<String> = file.general.iter().filter(|t| !covered.contains(t)).cloned().collect();
        if !uncovered.is_empty() {
            return Err(Error::TopicsNotInAnyRegion(uncovered));
        }
        Ok(KnowledgeBase { general: file.general, regions, position })
    }

    /// Serialises back to the on-disk format accepted by [`KnowledgeBase::parse`].
    pub fn to_json(&self) -> String {
        let file = KnowledgeFile {
            general: self.general.clone(),
            regions: self.regions.iter().map(|(t, v)| (t.as_str().to_string(), v.clone())).collect(),
        };
        serde_json::to_string(&file).expect("knowledge base serialises")
    }

    /// The general set, in canonical file order.
    pub fn general(&self) -> &[String] {
        &self.general
    }

    pub fn region(&self, tag: RegionTag) -> &[String] {
        &self.regions[&tag]
    }

    pub fn position(&self, topic: &str) -> Option<usize> {
        self.position.get(topic).copied()
    }

    /// The region's subset, i.e. the topics whose indicator is on for `tag`.
    pub fn select(&self, tag: RegionTag) -> TopicSet {
        let topics = self.regions[&tag].clone();
        let indices = topics.iter().map(|t| self.position[t]).collect();
        TopicSet { topics, indices }
    }

    /// Tag lookup from a string. Unknown tags are an error unless
    /// `fallback_full` is set, in which case the whole general set is returned.
    pub fn select_str(&self, tag: &str, fallback_full: bool) -> Result<TopicSet> {
        match tag.parse::<RegionTag>() {
            Ok(t) => Ok(self.select(t)),
            Err(_) if fallback_full => Ok(self.all()),
            Err(e) => Err(e),
        }
    }

    /// Every topic (no region filtering).
    pub fn all(&self) -> TopicSet {
        TopicSet { topics: self.general.clone(), indices: (0..self.general.len()).collect() }
    }
}

/// Source of the frozen topic vectors.
#[derive(Clone, Debug)]
pub enum TopicEmbedder {
    /// Deterministic pseudo-random row per topic string, seeded by a hash of
    /// the string and the embedder seed.
    Hashed { seed: u64, dim: usize },
    /// Precomputed vectors, e.g. exported from an external text encoder.
    Table { dim: usize, rows: HashMap<String, Vec<f32>> },
}

#[derive(Deserialize)]
struct EmbeddingFile {
    dim: usize,
    embeddings: HashMap<String, Vec<f32>>,
}

impl TopicEmbedder {
    pub fn hashed(seed: u64, dim: usize) -> Self {
        TopicEmbedder::Hashed { seed, dim }
    }

    /// Reads `{"dim": d, "embeddings": {"topic": [..], ..}}`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let file: EmbeddingFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let Some((t, v)) = file.embeddings.iter().find(|(_, v)| v.len() != file.dim) {
            return Err(Error::Shape(format!("embedding for {t:?} has {} values, expected {}", v.len(), file.dim)));
        }
        Ok(TopicEmbedder::Table { dim: file.dim, rows: file.embeddings })
    }

    pub fn dim(&self) -> usize {
        match self {
            TopicEmbedder::Hashed { dim, .. } | TopicEmbedder::Table { dim, .. } => *dim,
        }
    }

    fn row(&self, topic: &str) -> Result<Vec<f32>> {
        match self {
            TopicEmbedder::Hashed { seed, dim } => {
                let mut h = Sha256::new();
                h.update(seed.to_le_bytes());
                h.update(topic.as_bytes());
                let digest = h.finalize();
                let mut key = [0u8; 32];
                key.copy_from_slice(&digest);
                let mut rng = ChaCha8Rng::from_seed(key);
                let a = 3f32.sqrt();
                Ok((0..*dim).map(|_| rng.random_range(-a..a)).collect())
            }
            TopicEmbedder::Table { rows, .. } => rows
                .get(topic)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("no embedding for topic {topic:?}"))),
        }
    }

    /// One row per topic, in the order given.
    pub fn embed(&self, topics: &TopicSet) -> Result<TopicEmbeddings> {
        if topics.is_empty() {
            return Err(Error::EmptyTopicSet);
        }
        let dim = self.dim();
        let mut matrix = Array2::<f32>::zeros((topics.len(), dim));
        for (i, t) in topics.topics.iter().enumerate() {
            let row = self.row(t)?;
            for (o, v) in matrix.row_mut(i).iter_mut().zip(row) {
                *o = v;
            }
        }
        Ok(TopicEmbeddings { matrix, topics: topics.topics.clone() })
    }
}

/// Frozen `k × d_k` topic matrix; row `i` embeds `topics[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicEmbeddings {
    pub matrix: Array2<f32>,
    pub topics: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const CHEST: [&str; 20] = [
        "airspace disease", "atelectasis", "calcinosis", "cardiomegaly", "cicatrix", "edema",
        "effusion", "emphysema", "fractures", "hernia", "hypoinflation", "lesion",
        "medical device", "normal", "opacity", "other", "pneumonia", "pneumothorax",
        "scoliosis", "thickening",
    ];

    #[test]
    fn bundled_chest_subset_is_exact() {
        let kb = KnowledgeBase::bundled();
        assert_eq!(kb.region(RegionTag::Chest), CHEST.map(String::from).as_slice());
        assert_eq!(kb.select(RegionTag::Chest).len(), 20);
    }

    #[test]
    fn general_set_size_matches_distinct_count() {
        // Distinct strings across the "general" array of the bundled file.
        let raw: serde_json::Value = serde_json::from_str(BUNDLED_KNOWLEDGE).unwrap();
        let distinct: HashSet<&str> =
            raw["general"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
        let kb = KnowledgeBase::bundled();
        assert_eq!(kb.general().len(), distinct.len());
        assert_eq!(kb.general().len(), 123);
    }

    #[test]
    fn union_of_regions_is_general_set() {
        let kb = KnowledgeBase::bundled();
        let union: HashSet<&String> = RegionTag::ALL.iter().flat_map(|&t| kb.region(t)).collect();
        let general: HashSet<&String> = kb.general().iter().collect();
        assert_eq!(union, general);
    }

    #[test]
    fn shared_topics_appear_in_several_regions() {
        let kb = KnowledgeBase::bundled();
        for tag in [RegionTag::Chest, RegionTag::Hip, RegionTag::Shoulder] {
            assert!(kb.select(tag).topics.iter().any(|t| t == "fractures"), "{tag}");
        }
    }

    #[test]
    fn subset_violation_is_reported() {
        let text = r#"{"general":["a"],"regions":{"chest":["a","xyz"],"abdomen":["a"],"knee":["a"],"hip":["a"],"wrist":["a"],"shoulder":["a"]}}"#;
        match KnowledgeBase::parse(text) {
            Err(Error::TopicsNotInGeneral(v)) => assert_eq!(v, vec!["xyz".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extra_general_topic_is_reported() {
        let text = r#"{"general":["a","b"],"regions":{"chest":["a"],"abdomen":["a"],"knee":["a"],"hip":["a"],"wrist":["a"],"shoulder":["a"]}}"#;
        assert!(matches!(KnowledgeBase::parse(text), Err(Error::TopicsNotInAnyRegion(_))));
    }

    #[test]
    fn malformed_file_names_the_line() {
        let text = "{\n\"general\": [\"a\",\n oops]\n}";
        match KnowledgeBase::parse(text) {
            Err(Error::KnowledgeFormat { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tag_parsing() {
        assert_eq!("chest X-ray".parse::<RegionTag>().unwrap(), RegionTag::Chest);
        assert_eq!("Hip".parse::<RegionTag>().unwrap(), RegionTag::Hip);
        let err = "brain".parse::<RegionTag>().unwrap_err();
        assert!(err.to_string().contains("unknown region tag"));
        let kb = KnowledgeBase::bundled();
        assert!(kb.select_str("brain", false).is_err());
        assert_eq!(kb.select_str("brain", true).unwrap().len(), 123);
    }

    #[test]
    fn selection_indices_point_into_general_set() {
        let kb = KnowledgeBase::bundled();
        for tag in RegionTag::ALL {
            let sel = kb.select(tag);
            for (t, &i) in sel.topics.iter().zip(&sel.indices) {
                assert_eq!(&kb.general()[i], t);
            }
        }
    }

    #[test]
    fn hashed_embeddings_are_deterministic_and_distinct() {
        let kb = KnowledgeBase::bundled();
        let emb = TopicEmbedder::hashed(0, 64);
        let chest = emb.embed(&kb.select(RegionTag::Chest)).unwrap();
        assert_eq!(chest.matrix.dim(), (20, 64));
        assert_eq!(chest, emb.embed(&kb.select(RegionTag::Chest)).unwrap());
        let all = emb.embed(&kb.all()).unwrap();
        for i in 0..all.matrix.nrows() {
            for j in i + 1..all.matrix.nrows() {
                assert_ne!(all.matrix.row(i), all.matrix.row(j), "{} vs {}", all.topics[i], all.topics[j]);
            }
        }
        let empty = TopicSet { topics: vec![], indices: vec![] };
        assert_eq!(emb.embed(&empty).unwrap_err().to_string(), "empty topic set");
    }

    #[test]
    fn multi_word_topics_embed_as_units() {
        let emb = TopicEmbedder::hashed(3, 8);
        let set = |t: &str| TopicSet { topics: vec![t.to_string()], indices: vec![0] };
        let whole = emb.embed(&set("airspace disease")).unwrap();
        let part = emb.embed(&set("airspace")).unwrap();
        assert_ne!(whole.matrix, part.matrix);
    }
}
