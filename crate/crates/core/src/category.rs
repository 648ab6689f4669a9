//! Category identification and taxonomy mapping.
//!
//! Identification correlates a decoded feature vector against category
//! average feature profiles over a seeded candidate set. Decoded categories
//! that are not generator classes are mapped onto the nearest generator
//! class by bidirectional search over hypernym/hyponym edges, with a manual
//! override table consulted first.

use crate::dataio::Image;
use crate::featurenet::FeatureNet;
use crate::util::{derive_rng, pearson};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CategoryError {
    #[error("category {0} has no images")]
    EmptyCategory(String),
    #[error("identification undefined: decoded vector has zero variance")]
    IdentificationUndefined,
    #[error("need at least 2 candidates, got {0}")]
    TooFewCandidates(usize),
    #[error("insufficient categories: need {need} distractors, have {have}")]
    InsufficientCategories { need: usize, have: usize },
    #[error("unknown category {0}")]
    UnknownCategory(String),
    #[error("no generator class reachable from {0}")]
    Unmappable(String),
    #[error("taxonomy cycle involving node {0}")]
    CycleDetected(String),
    #[error("taxonomy references unknown node {0}")]
    DanglingReference(String),
    #[error("malformed taxonomy file {path}: line {line}: {reason}")]
    MalformedFile {
        path: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryProfile {
    pub category_id: String,
    pub average_feature: Vec<f64>,
    pub member_count: usize,
}

/// Arithmetic mean of per-image flattened features, per category.
pub fn category_average_features(
    images_by_category: &BTreeMap<String, Vec<Image>>,
    net: &FeatureNet,
    layer: usize,
) -> Result<Vec<CategoryProfile>, CategoryError> {
    let mut out = Vec::new();
    for (cat, images) in images_by_category {
        if images.is_empty() {
            return Err(CategoryError::EmptyCategory(cat.clone()));
        }
        let mut acc: Vec<f64> = Vec::new();
        for img in images {
            let fs = net
                .forward_features(img)
                .expect("category image resolution must match the net");
            let f = fs.flattened(layer);
            if acc.is_empty() {
                acc = f.to_vec();
            } else {
                for (a, b) in acc.iter_mut().zip(f) {
                    *a += b;
                }
            }
        }
        let n = images.len() as f64;
        for a in &mut acc {
            *a /= n;
        }
        out.push(CategoryProfile {
            category_id: cat.clone(),
            average_feature: acc,
            member_count: images.len(),
        });
    }
    Ok(out)
}

/// Ranks candidates by Pearson correlation with the decoded vector,
/// descending; equal correlations break toward the smaller category id.
pub fn identify_category(
    decoded: &[f64],
    candidates: &[CategoryProfile],
) -> Result<Vec<(String, f64)>, CategoryError> {
    if candidates.len() < 2 {
        return Err(CategoryError::TooFewCandidates(candidates.len()));
    }
    let mut ranked: Vec<(String, f64)> = Vec::with_capacity(candidates.len());
    for c in candidates {
        assert_eq!(c.average_feature.len(), decoded.len());
        let r = match pearson(decoded, &c.average_feature) {
            Some(r) => r,
            None => {
                // A flat profile scores 0; a flat decoded vector makes the
                // whole task undefined.
                let var_decoded = {
                    let m = decoded.iter().sum::<f64>() / decoded.len() as f64;
                    decoded.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                };
                if var_decoded <= 0.0 {
                    return Err(CategoryError::IdentificationUndefined);
                }
                0.0
            }
        };
        ranked.push((c.category_id.clone(), r));
    }
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(ranked)
}

/// Candidate set: the true category plus `n_distractors` drawn uniformly
/// without replacement from the remaining categories.
pub fn build_candidate_set(
    true_category: &str,
    all_categories: &[String],
    n_distractors: usize,
    seed: u64,
) -> Result<Vec<String>, CategoryError> {
    let others: Vec<&String> = all_categories
        .iter()
        .filter(|c| c.as_str() != true_category)
        .collect();
    if n_distractors > others.len() {
        return Err(CategoryError::InsufficientCategories {
            need: n_distractors,
            have: others.len(),
        });
    }
    let mut rng = derive_rng(seed, &["candidate-set", true_category]);
    let picks = sample(&mut rng, others.len(), n_distractors);
    let mut set = vec![true_category.to_string()];
    set.extend(picks.iter().map(|i| others[i].clone()));
    // Invariant: the true category is always present.
    debug_assert!(set.iter().any(|c| c == true_category));
    Ok(set)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeDirection {
    /// Step toward a more general node.
    Hypernym,
    /// Step toward a more specific node.
    Hyponym,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoryMapping {
    pub source_id: String,
    pub target_id: String,
    pub path: Vec<(EdgeDirection, String)>,
    pub distance: usize,
    /// True when the mapping came from the manual override table.
    pub from_override: bool,
}

#[derive(Debug, Clone)]
pub struct TaxonomyNode {
    pub name: String,
    pub hypernyms: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Taxonomy {
    pub nodes: BTreeMap<String, TaxonomyNode>,
    pub generator_classes: BTreeSet<String>,
    pub overrides: BTreeMap<String, String>,
    /// Inverted hypernym edges.
    hyponyms: HashMap<String, Vec<String>>,
}

impl Taxonomy {
    pub fn build(
        nodes: BTreeMap<String, TaxonomyNode>,
        generator_classes: BTreeSet<String>,
        overrides: BTreeMap<String, String>,
    ) -> Result<Self, CategoryError> {
        for (id, node) in &nodes {
            for h in &node.hypernyms {
                if !nodes.contains_key(h) {
                    return Err(CategoryError::DanglingReference(format!("{id} -> {h}")));
                }
            }
        }
        for g in &generator_classes {
            if !nodes.contains_key(g) {
                return Err(CategoryError::DanglingReference(g.clone()));
            }
        }
        for (s, t) in &overrides {
            if !nodes.contains_key(s) {
                return Err(CategoryError::DanglingReference(s.clone()));
            }
            if !generator_classes.contains(t) {
                return Err(CategoryError::DanglingReference(format!(
                    "override target {t} is not a generator class"
                )));
            }
        }
        let mut hyponyms: HashMap<String, Vec<String>> = HashMap::new();
        for (id, node) in &nodes {
            for h in &node.hypernyms {
                hyponyms.entry(h.clone()).or_default().push(id.clone());
            }
        }
        for v in hyponyms.values_mut() {
            v.sort();
        }
        let tax = Self {
            nodes,
            generator_classes,
            overrides,
            hyponyms,
        };
        tax.check_acyclic()?;
        Ok(tax)
    }

    fn check_acyclic(&self) -> Result<(), CategoryError> {
        // Kahn's algorithm over hypernym edges.
        let mut indeg: BTreeMap<&str, usize> = self.nodes.keys().map(|k| (k.as_str(), 0)).collect();
        for node in self.nodes.values() {
            for h in &node.hypernyms {
                *indeg.get_mut(h.as_str()).unwrap() += 1;
            }
        }
        let mut queue: VecDeque<&str> = indeg
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&k, _)| k)
            .collect();
        let mut seen = 0;
        while let Some(id) = queue.pop_front() {
            seen += 1;
            for h in &self.nodes[id].hypernyms {
                let d = indeg.get_mut(h.as_str()).unwrap();
                *d -= 1;
                if *d == 0 {
                    queue.push_back(h.as_str());
                }
            }
        }
        if seen != self.nodes.len() {
            let culprit = indeg
                .iter()
                .find(|(_, &d)| d > 0)
                .map(|(&k, _)| k.to_string())
                .unwrap_or_default();
            return Err(CategoryError::CycleDetected(culprit));
        }
        Ok(())
    }

    fn neighbors(&self, id: &str) -> Vec<(EdgeDirection, &str)> {
        let mut out: Vec<(EdgeDirection, &str)> = Vec::new();
        if let Some(node) = self.nodes.get(id) {
            for h in &node.hypernyms {
                out.push((EdgeDirection::Hypernym, h.as_str()));
            }
        }
        if let Some(children) = self.hyponyms.get(id) {
            for c in children {
                out.push((EdgeDirection::Hyponym, c.as_str()));
            }
        }
        out
    }

    /// Maps a category onto a generator class: override table first, then
    /// bidirectional breadth-first search over hypernym and hyponym edges.
    /// Ties among equally near classes break by (fewer hypernym steps, then
    /// lexicographic target id).
    pub fn map_category(&self, source_id: &str) -> Result<CategoryMapping, CategoryError> {
        if !self.nodes.contains_key(source_id) {
            return Err(CategoryError::UnknownCategory(source_id.to_string()));
        }
        if let Some(target) = self.overrides.get(source_id) {
            let path = self
                .search(source_id, Some(target))
                .map(|m| m.path)
                .unwrap_or_default();
            return Ok(CategoryMapping {
                source_id: source_id.to_string(),
                target_id: target.clone(),
                distance: path.len(),
                path,
                from_override: true,
            });
        }
        if self.generator_classes.contains(source_id) {
            return Ok(CategoryMapping {
                source_id: source_id.to_string(),
                target_id: source_id.to_string(),
                path: Vec::new(),
                distance: 0,
                from_override: false,
            });
        }
        self.search(source_id, None)
            .ok_or_else(|| CategoryError::Unmappable(source_id.to_string()))
    }

    /// BFS in layers; within each layer states are processed in a
    /// deterministic order sorted by (hypernym steps, node id). When
    /// `pinned_target` is set the search runs to that node specifically.
    fn search(&self, source: &str, pinned_target: Option<&str>) -> Option<CategoryMapping> {
        // State bookkeeping: per node, the best (hypernym_steps, path) seen
        // at the minimal distance.
        #[derive(Clone)]
        struct Best {
            dist: usize,
            hyp_steps: usize,
            path: Vec<(EdgeDirection, String)>,
        }
        let mut best: HashMap<String, Best> = HashMap::new();
        best.insert(
            source.to_string(),
            Best {
                dist: 0,
                hyp_steps: 0,
                path: Vec::new(),
            },
        );
        let mut frontier: Vec<String> = vec![source.to_string()];
        let is_target = |id: &str| match pinned_target {
            Some(t) => id == t,
            None => self.generator_classes.contains(id),
        };
        let mut dist = 0usize;
        loop {
            // Collect targets reached at this distance.
            let mut hits: Vec<&String> = frontier.iter().filter(|id| is_target(id)).collect();
            if !hits.is_empty() {
                hits.sort_by(|a, b| {
                    let ba = &best[a.as_str()];
                    let bb = &best[b.as_str()];
                    ba.hyp_steps.cmp(&bb.hyp_steps).then(a.cmp(b))
                });
                let winner = hits[0].clone();
                let b = best[&winner].clone();
                return Some(CategoryMapping {
                    source_id: source.to_string(),
                    target_id: winner,
                    distance: b.dist,
                    path: b.path,
                    from_override: false,
                });
            }
            if frontier.is_empty() {
                return None;
            }
            dist += 1;
            // Expand in deterministic (hyp_steps, id) order so tie-broken
            // paths are reproducible.
            let mut ordered = frontier.clone();
            ordered.sort_by(|a, b| {
                let ba = &best[a.as_str()];
                let bb = &best[b.as_str()];
                ba.hyp_steps.cmp(&bb.hyp_steps).then(a.cmp(b))
            });
            let mut next: Vec<String> = Vec::new();
            for id in ordered {
                let cur = best[&id].clone();
                for (dir, nb) in self.neighbors(&id) {
                    let hyp = cur.hyp_steps + usize::from(dir == EdgeDirection::Hypernym);
                    let candidate_better = match best.get(nb) {
                        None => true,
                        Some(b) => dist == b.dist && hyp < b.hyp_steps,
                    };
                    if candidate_better {
                        let mut path = cur.path.clone();
                        path.push((dir, nb.to_string()));
                        let newly = !best.contains_key(nb);
                        best.insert(
                            nb.to_string(),
                            Best {
                                dist,
                                hyp_steps: hyp,
                                path,
                            },
                        );
                        if newly {
                            next.push(nb.to_string());
                        }
                    }
                }
            }
            frontier = next;
        }
    }
}

fn parse_tsv_lines(text: &str, path: &str, want_cols: usize) -> Result<Vec<Vec<String>>, CategoryError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<String> = line.split('\t').map(|s| s.to_string()).collect();
        if cols.len() != want_cols || cols.iter().any(|c| c.is_empty()) {
            return Err(CategoryError::MalformedFile {
                path: path.to_string(),
                line: i + 1,
                reason: format!("expected {want_cols} nonempty tab-separated fields"),
            });
        }
        rows.push(cols);
    }
    Ok(rows)
}

/// Parses taxonomy content from in-memory strings. File layout:
/// `names.tsv` (id, display name), `edges.tsv` (child id, parent id),
/// `classes.txt` (one generator-class id per line) and an optional
/// `overrides.tsv` (source id, target class id).
pub fn parse_taxonomy(
    names_tsv: &str,
    edges_tsv: &str,
    classes_txt: &str,
    overrides_tsv: Option<&str>,
) -> Result<Taxonomy, CategoryError> {
    let mut nodes: BTreeMap<String, TaxonomyNode> = BTreeMap::new();
    for row in parse_tsv_lines(names_tsv, "names.tsv", 2)? {
        nodes.insert(
            row[0].clone(),
            TaxonomyNode {
                name: row[1].clone(),
                hypernyms: Vec::new(),
            },
        );
    }
    for (i, row) in parse_tsv_lines(edges_tsv, "edges.tsv", 2)?.into_iter().enumerate() {
        let (child, parent) = (&row[0], &row[1]);
        if child == parent {
            return Err(CategoryError::MalformedFile {
                path: "edges.tsv".into(),
                line: i + 1,
                reason: "self-loop".into(),
            });
        }
        match nodes.get_mut(child) {
            Some(n) => n.hypernyms.push(parent.clone()),
            None => return Err(CategoryError::DanglingReference(child.clone())),
        }
    }
    let mut classes = BTreeSet::new();
    for line in classes_txt.lines() {
        let line = line.trim();
        if !line.is_empty() && !line.starts_with('#') {
            classes.insert(line.to_string());
        }
    }
    let mut overrides = BTreeMap::new();
    if let Some(text) = overrides_tsv {
        for row in parse_tsv_lines(text, "overrides.tsv", 2)? {
            overrides.insert(row[0].clone(), row[1].clone());
        }
    }
    Taxonomy::build(nodes, classes, overrides)
}

/// Loads a taxonomy from a directory containing `names.tsv`, `edges.tsv`,
/// `classes.txt` and optionally `overrides.tsv`.
pub fn load_taxonomy(dir: &Path) -> Result<Taxonomy, CategoryError> {
    let names = std::fs::read_to_string(dir.join("names.tsv"))?;
    let edges = std::fs::read_to_string(dir.join("edges.tsv"))?;
    let classes = std::fs::read_to_string(dir.join("classes.txt"))?;
    let overrides_path = dir.join("overrides.tsv");
    let overrides = if overrides_path.exists() {
        Some(std::fs::read_to_string(overrides_path)?)
    } else {
        None
    };
    parse_taxonomy(&names, &edges, &classes, overrides.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurenet::{ConvNetSpec, FeatureNet};
    use crate::util::derive_rng;
    use rand::Rng;

    fn tiny_tax(edges: &[(&str, &str)], classes: &[&str]) -> Result<Taxonomy, CategoryError> {
        let mut ids: BTreeSet<&str> = BTreeSet::new();
        for (a, b) in edges {
            ids.insert(a);
            ids.insert(b);
        }
        for c in classes {
            ids.insert(c);
        }
        let names: String = ids
            .iter()
            .map(|id| format!("{id}\t{id}\n"))
            .collect();
        let edge_text: String = edges
            .iter()
            .map(|(a, b)| format!("{a}\t{b}\n"))
            .collect();
        let class_text: String = classes.iter().map(|c| format!("{c}\n")).collect();
        parse_taxonomy(&names, &edge_text, &class_text, None)
    }

    #[test]
    fn chain_maps_with_distance_two() {
        let tax = tiny_tax(&[("a", "b"), ("b", "c")], &["c"]).unwrap();
        let m = tax.map_category("a").unwrap();
        assert_eq!(m.target_id, "c");
        assert_eq!(m.distance, 2);
        assert!(m
            .path
            .iter()
            .all(|(d, _)| *d == EdgeDirection::Hypernym));
    }

    #[test]
    fn self_loop_is_a_cycle_error() {
        assert!(matches!(
            tiny_tax(&[("a", "a")], &["a"]),
            Err(CategoryError::MalformedFile { .. })
        ));
        // Longer cycle.
        assert!(matches!(
            tiny_tax(&[("a", "b"), ("b", "a")], &["a"]),
            Err(CategoryError::CycleDetected(_))
        ));
    }

    #[test]
    fn source_already_generator_class_is_identity() {
        let tax = tiny_tax(&[("a", "b")], &["a"]).unwrap();
        let m = tax.map_category("a").unwrap();
        assert_eq!(m.target_id, "a");
        assert_eq!(m.distance, 0);
        assert!(m.path.is_empty());
    }

    #[test]
    fn mixed_direction_path_reaches_sibling() {
        // duck -> waterfowl -> goose: one hypernym then one hyponym step.
        let tax = tiny_tax(&[("duck", "waterfowl"), ("goose", "waterfowl")], &["goose"]).unwrap();
        let m = tax.map_category("duck").unwrap();
        assert_eq!(m.target_id, "goose");
        assert_eq!(m.distance, 2);
        assert_eq!(m.path[0].0, EdgeDirection::Hypernym);
        assert_eq!(m.path[1].0, EdgeDirection::Hyponym);
    }

    #[test]
    fn tie_break_prefers_fewer_hypernym_steps() {
        // Two classes at distance 2: one via 2 hypernym steps, one via
        // hypernym + hyponym. The hyponym route wins.
        let tax = tiny_tax(
            &[
                ("src", "mid"),
                ("mid", "up"), // up at 2 hypernym steps
                ("spec", "mid"), // spec at hypernym+hyponym
            ],
            &["up", "spec"],
        )
        .unwrap();
        let m = tax.map_category("src").unwrap();
        assert_eq!(m.target_id, "spec");
    }

    #[test]
    fn unmappable_when_no_class_reachable() {
        let tax = tiny_tax(&[("a", "b"), ("x", "y")], &["y"]).unwrap();
        assert!(matches!(
            tax.map_category("a"),
            Err(CategoryError::Unmappable(_))
        ));
    }

    #[test]
    fn override_beats_bfs() {
        let mut ids = BTreeMap::new();
        for id in ["a", "b", "near", "far"] {
            ids.insert(
                id.to_string(),
                TaxonomyNode {
                    name: id.into(),
                    hypernyms: Vec::new(),
                },
            );
        }
        ids.get_mut("a").unwrap().hypernyms.push("b".into());
        ids.get_mut("near").unwrap().hypernyms.push("b".into());
        ids.get_mut("far").unwrap().hypernyms.push("near".into());
        let classes: BTreeSet<String> = ["near", "far"].iter().map(|s| s.to_string()).collect();
        let overrides: BTreeMap<String, String> =
            [("a".to_string(), "far".to_string())].into_iter().collect();
        let tax = Taxonomy::build(ids, classes, overrides).unwrap();
        let m = tax.map_category("a").unwrap();
        assert_eq!(m.target_id, "far");
        assert!(m.from_override);
    }

    /// BFS minimality vs exhaustive search on random DAG taxonomies.
    #[test]
    fn bfs_distance_is_minimal_vs_exhaustive() {
        for trial in 0..10 {
            let mut rng = derive_rng(42 + trial, &["tax"]);
            let n = 30 + (trial as usize % 3) * 60; // up to ~200 nodes
            let ids: Vec<String> = (0..n).map(|i| format!("n{i:03}")).collect();
            let mut nodes: BTreeMap<String, TaxonomyNode> = ids
                .iter()
                .map(|id| {
                    (
                        id.clone(),
                        TaxonomyNode {
                            name: id.clone(),
                            hypernyms: Vec::new(),
                        },
                    )
                })
                .collect();
            // Edges only from higher to lower index: acyclic by construction.
            for i in 1..n {
                let parents = 1 + rng.random_range(0..2);
                for _ in 0..parents {
                    let p = rng.random_range(0..i);
                    let pid = ids[p].clone();
                    let node = nodes.get_mut(&ids[i]).unwrap();
                    if !node.hypernyms.contains(&pid) {
                        node.hypernyms.push(pid);
                    }
                }
            }
            let mut classes = BTreeSet::new();
            for id in &ids {
                if rng.random_range(0..5) == 0 {
                    classes.insert(id.clone());
                }
            }
            if classes.is_empty() {
                classes.insert(ids[0].clone());
            }
            let tax = Taxonomy::build(nodes.clone(), classes.clone(), BTreeMap::new()).unwrap();

            // Exhaustive: undirected BFS distances from each source.
            let undirected_dist = |src: &str| -> HashMap<String, usize> {
                let mut dist = HashMap::new();
                dist.insert(src.to_string(), 0usize);
                let mut q = VecDeque::new();
                q.push_back(src.to_string());
                while let Some(u) = q.pop_front() {
                    let d = dist[&u];
                    for (_, v) in tax.neighbors(&u) {
                        if !dist.contains_key(v) {
                            dist.insert(v.to_string(), d + 1);
                            q.push_back(v.to_string());
                        }
                    }
                }
                dist
            };
            for src in ids.iter().take(20) {
                let dist = undirected_dist(src);
                let want = classes.iter().filter_map(|c| dist.get(c)).min().copied();
                match (tax.map_category(src), want) {
                    (Ok(m), Some(d)) => assert_eq!(m.distance, d, "source {src}"),
                    (Err(CategoryError::Unmappable(_)), None) => {}
                    (got, want) => panic!("mismatch for {src}: {got:?} vs {want:?}"),
                }
            }
        }
    }

    fn small_net() -> FeatureNet {
        let spec = ConvNetSpec {
            input_size: 16,
            layers: [4, 4, 8, 8]
                .iter()
                .map(|&c| crate::featurenet::LayerSpec {
                    out_channels: c,
                    kernel: 3,
                    stride: 1,
                    pool: true,
                })
                .collect(),
            weight_seed: 5,
        };
        FeatureNet::init_deterministic(spec).unwrap()
    }

    fn random_image(seed: u64) -> Image {
        let mut rng = derive_rng(seed, &["cat-img"]);
        Image::new(16, 16, (0..16 * 16 * 3).map(|_| rng.random::<f32>()).collect())
    }

    #[test]
    fn profile_of_single_image_is_its_features() {
        let net = small_net();
        let img = random_image(1);
        let mut by_cat = BTreeMap::new();
        by_cat.insert("c0".to_string(), vec![img.clone()]);
        let profiles = category_average_features(&by_cat, &net, 3).unwrap();
        let fs = net.forward_features(&img).unwrap();
        assert_eq!(profiles[0].average_feature, fs.flattened(3).to_vec());
    }

    #[test]
    fn profile_mean_matches_recompute_oracle() {
        let net = small_net();
        let images: Vec<Image> = (0..8).map(|i| random_image(10 + i)).collect();
        let mut by_cat = BTreeMap::new();
        by_cat.insert("c0".to_string(), images.clone());
        let profiles = category_average_features(&by_cat, &net, 2).unwrap();
        // Brute-force recompute.
        let dim = net.layer_dim(2);
        let mut mean = vec![0.0f64; dim];
        for img in &images {
            let fs = net.forward_features(img).unwrap();
            for (m, f) in mean.iter_mut().zip(fs.flattened(2)) {
                *m += f / 8.0;
            }
        }
        for (a, b) in profiles[0].average_feature.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identify_exact_profile_wins_with_r_one() {
        let net = small_net();
        let mut by_cat = BTreeMap::new();
        for i in 0..4 {
            by_cat.insert(format!("c{i}"), vec![random_image(20 + i)]);
        }
        let profiles = category_average_features(&by_cat, &net, 3).unwrap();
        let decoded = profiles[2].average_feature.clone();
        let ranked = identify_category(&decoded, &profiles).unwrap();
        assert_eq!(ranked[0].0, "c2");
        assert!((ranked[0].1 - 1.0).abs() < 1e-9);
        // Positive affine transform keeps the winner and r = 1.
        let transformed: Vec<f64> = decoded.iter().map(|v| 3.0 * v + 0.7).collect();
        let ranked2 = identify_category(&transformed, &profiles).unwrap();
        assert_eq!(ranked2[0].0, "c2");
        assert!((ranked2[0].1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_variance_decoded_vector_is_an_error() {
        let net = small_net();
        let mut by_cat = BTreeMap::new();
        for i in 0..2 {
            by_cat.insert(format!("c{i}"), vec![random_image(30 + i)]);
        }
        let profiles = category_average_features(&by_cat, &net, 3).unwrap();
        let flat = vec![0.5; profiles[0].average_feature.len()];
        assert!(matches!(
            identify_category(&flat, &profiles),
            Err(CategoryError::IdentificationUndefined)
        ));
    }

    #[test]
    fn candidate_sets_are_seeded_and_contain_truth() {
        let cats: Vec<String> = (0..40).map(|i| format!("c{i:02}")).collect();
        let a = build_candidate_set("c05", &cats, 29, 7).unwrap();
        let b = build_candidate_set("c05", &cats, 29, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        assert!(a.contains(&"c05".to_string()));
        let empty = build_candidate_set("c05", &cats, 0, 7).unwrap();
        assert_eq!(empty, vec!["c05".to_string()]);
        assert!(build_candidate_set("c05", &cats, 40, 7).is_err());
    }
}
