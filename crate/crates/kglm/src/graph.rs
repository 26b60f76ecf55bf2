//! Knowledge-graph data model: validated triplet store, neighbor access,
//! minibatch multi-hop neighborhood sampling, random walks, and the
//! unseen-entity split used by the adaptation harness.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, StreamTag};
use crate::text::{Vocabulary, CLS_ID, EOS_ID};

/// Immutable entity/relation/triplet store with descriptions and optional
/// per-entity category labels.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    pub entity_count: usize,
    pub relation_count: usize,
    pub category_count: usize,
    pub triplets: Vec<(usize, usize, usize)>,
    /// Category label per entity; None for unlabeled entities.
    pub categories: Vec<Option<usize>>,
    /// Wrapped token-id sequences, one per entity.
    pub entity_descriptions: Vec<Vec<usize>>,
    /// Wrapped token-id sequences, one per relation.
    pub relation_descriptions: Vec<Vec<usize>>,
    /// Outgoing (relation, tail) per head entity, sorted.
    out_edges: Vec<Vec<(usize, usize)>>,
    /// Incoming (relation, head) per tail entity, sorted.
    in_edges: Vec<Vec<(usize, usize)>>,
}

/// One sampled or traversed edge; `inverse` marks tail→head traversal.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Edge {
    pub target: usize,
    pub source: usize,
    pub relation: usize,
    pub inverse: bool,
}

/// Layered minibatch computation graph. `node_sets[0]` lists the targets;
/// each deeper set extends the previous one (prefix property), so a node
/// keeps its index across hops. `edge_sets[l]` holds the sampled edges that
/// compute hop-l embeddings from hop-(l+1) embeddings.
#[derive(Clone, Debug)]
pub struct Subgraph {
    pub node_sets: Vec<Vec<usize>>,
    pub edge_sets: Vec<Vec<Edge>>,
}

impl Subgraph {
    pub fn hops(&self) -> usize {
        self.edge_sets.len()
    }

    pub fn targets(&self) -> &[usize] {
        &self.node_sets[0]
    }

    /// All nodes the computation touches (the outermost set).
    pub fn support(&self) -> &[usize] {
        self.node_sets.last().unwrap()
    }
}

impl KnowledgeGraph {
    pub fn new(
        entity_count: usize,
        relation_count: usize,
        category_count: usize,
        triplets: Vec<(usize, usize, usize)>,
        categories: Vec<Option<usize>>,
        entity_descriptions: Vec<Vec<usize>>,
        relation_descriptions: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if categories.len() != entity_count || entity_descriptions.len() != entity_count {
            return Err(Error::Graph(format!(
                "entity-indexed fields must have length {entity_count}"
            )));
        }
        if relation_descriptions.len() != relation_count {
            return Err(Error::Graph(format!(
                "relation descriptions must have length {relation_count}"
            )));
        }
        for (e, c) in categories.iter().enumerate() {
            if let Some(c) = c {
                if *c >= category_count {
                    return Err(Error::Graph(format!(
                        "entity {e} category {c} out of range ({category_count})"
                    )));
                }
            }
        }
        for (i, d) in entity_descriptions.iter().chain(&relation_descriptions).enumerate() {
            if d.len() < 2 || d[0] != CLS_ID || *d.last().unwrap() != EOS_ID {
                return Err(Error::Graph(format!(
                    "description {i} must be [CLS]-wrapped and [EOS]-terminated"
                )));
            }
        }
        let mut seen = HashSet::with_capacity(triplets.len());
        let mut out_edges = vec![Vec::new(); entity_count];
        let mut in_edges = vec![Vec::new(); entity_count];
        for &(h, r, t) in &triplets {
            if h >= entity_count || t >= entity_count {
                return Err(Error::Graph(format!("triplet ({h},{r},{t}): entity out of range")));
            }
            if r >= relation_count {
                return Err(Error::Graph(format!("triplet ({h},{r},{t}): relation out of range")));
            }
            if !seen.insert((h, r, t)) {
                return Err(Error::Graph(format!("duplicate triplet ({h},{r},{t})")));
            }
            out_edges[h].push((r, t));
            in_edges[t].push((r, h));
        }
        for adj in out_edges.iter_mut().chain(in_edges.iter_mut()) {
            adj.sort_unstable();
        }
        Ok(KnowledgeGraph {
            entity_count,
            relation_count,
            category_count,
            triplets,
            categories,
            entity_descriptions,
            relation_descriptions,
            out_edges,
            in_edges,
        })
    }

    /// The (relation, tail) pairs with `v` in head position, sorted.
    pub fn neighbors(&self, v: usize) -> Result<&[(usize, usize)]> {
        self.out_edges
            .get(v)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Graph(format!("entity {v} out of range")))
    }

    /// Undirected adjacency: forward edges first, then inverse, both sorted.
    /// Index order is the deterministic base order for sampling.
    fn undirected(&self, v: usize) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
        self.out_edges[v]
            .iter()
            .map(|&(r, u)| (r, u, false))
            .chain(self.in_edges[v].iter().map(|&(r, u)| (r, u, true)))
    }

    pub fn degree_undirected(&self, v: usize) -> usize {
        self.out_edges[v].len() + self.in_edges[v].len()
    }

    /// Distinct entities adjacent to v in either direction, sorted.
    pub fn neighbor_entities(&self, v: usize) -> Result<Vec<usize>> {
        if v >= self.entity_count {
            return Err(Error::Graph(format!("entity {v} out of range")));
        }
        let mut out: Vec<usize> = self.undirected(v).map(|(_, u, _)| u).collect();
        out.sort_unstable();
        out.dedup();
        Ok(out)
    }

    /// All entities at undirected distance 1..=k from v, sorted; v itself is
    /// excluded even when a cycle returns to it.
    pub fn k_hop_neighbors(&self, v: usize, k: usize) -> Result<Vec<usize>> {
        if v >= self.entity_count {
            return Err(Error::Graph(format!("entity {v} out of range")));
        }
        let mut seen = vec![false; self.entity_count];
        seen[v] = true;
        let mut frontier = vec![v];
        let mut reached = Vec::new();
        for _ in 0..k {
            let mut next = Vec::new();
            for &u in &frontier {
                for (_, w, _) in self.undirected(u) {
                    if !seen[w] {
                        seen[w] = true;
                        next.push(w);
                        reached.push(w);
                    }
                }
            }
            frontier = next;
        }
        reached.sort_unstable();
        Ok(reached)
    }

    /// Multi-hop minibatch sampling: per node, min(fanout, degree) distinct
    /// undirected neighbors without replacement. A node's sample is a
    /// function of (seed, node id) alone, so it is identical at every hop
    /// and in every subgraph drawn with the same seed.
    pub fn sample_neighborhood(
        &self,
        targets: &[usize],
        hops: usize,
        fanout: usize,
        seed: u64,
    ) -> Result<Subgraph> {
        if targets.is_empty() {
            return Err(Error::Graph("sample_neighborhood: empty targets".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&v| v >= self.entity_count) {
            return Err(Error::Graph(format!("target {bad} out of range")));
        }
        let mut node_sets: Vec<Vec<usize>> = vec![targets.to_vec()];
        let mut edge_sets: Vec<Vec<Edge>> = Vec::with_capacity(hops);
        let mut sampled: HashMap<usize, Vec<(usize, usize, bool)>> = HashMap::new();
        for l in 0..hops {
            let mut next = node_sets[l].clone();
            let mut present: HashSet<usize> = next.iter().copied().collect();
            let mut edges = Vec::new();
            for &v in &node_sets[l] {
                let picks = sampled.entry(v).or_insert_with(|| {
                    let all: Vec<(usize, usize, bool)> = self.undirected(v).collect();
                    if all.len() <= fanout {
                        all
                    } else {
                        let mut per_node = rng::derive(seed, StreamTag::NodeSample, v as u64);
                        let mut idx: Vec<usize> =
                            sample(&mut per_node, all.len(), fanout).iter().collect();
                        idx.sort_unstable();
                        idx.into_iter().map(|i| all[i]).collect()
                    }
                });
                for &(r, u, inverse) in picks.iter() {
                    if present.insert(u) {
                        next.push(u);
                    }
                    edges.push(Edge { target: v, source: u, relation: r, inverse });
                }
            }
            node_sets.push(next);
            edge_sets.push(edges);
        }
        Ok(Subgraph { node_sets, edge_sets })
    }

    /// Seeded random walks from each root along triplets in either
    /// direction; returns the sorted union of visited entities.
    pub fn random_walk(&self, roots: &[usize], length: usize, seed: u64) -> Result<Vec<usize>> {
        if let Some(&bad) = roots.iter().find(|&&v| v >= self.entity_count) {
            return Err(Error::Graph(format!("walk root {bad} out of range")));
        }
        let mut visited: HashSet<usize> = roots.iter().copied().collect();
        for (i, &root) in roots.iter().enumerate() {
            let mut walk_rng = rng::derive(seed, StreamTag::Walk, i as u64);
            let mut v = root;
            for _ in 0..length {
                let deg = self.degree_undirected(v);
                if deg == 0 {
                    break;
                }
                let pick = walk_rng.gen_range(0..deg);
                let (_, u, _) = self.undirected(v).nth(pick).unwrap();
                visited.insert(u);
                v = u;
            }
        }
        let mut batch: Vec<usize> = visited.into_iter().collect();
        batch.sort_unstable();
        Ok(batch)
    }

    /// Splits entities into a pre-training graph and an unseen graph, each
    /// the induced subgraph on its side, densely re-indexed. Category and
    /// relation vocabularies are shared.
    pub fn split_unseen(&self, fraction: f64, seed: u64) -> Result<GraphSplit> {
        if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
            return Err(Error::Graph(format!("split fraction {fraction} outside (0,1)")));
        }
        let n_unseen = (fraction * self.entity_count as f64).round() as usize;
        if n_unseen == 0 || n_unseen == self.entity_count {
            return Err(Error::Graph(format!(
                "fraction {fraction} leaves an empty side for N={}",
                self.entity_count
            )));
        }
        let mut split_rng = rng::derive(seed, StreamTag::Split, 0);
        let mut unseen_ids: Vec<usize> =
            sample(&mut split_rng, self.entity_count, n_unseen).iter().collect();
        unseen_ids.sort_unstable();
        let unseen_set: HashSet<usize> = unseen_ids.iter().copied().collect();
        let pretrain_ids: Vec<usize> =
            (0..self.entity_count).filter(|v| !unseen_set.contains(v)).collect();

        let build = |ids: &[usize]| -> Result<KnowledgeGraph> {
            let global_to_local: HashMap<usize, usize> =
                ids.iter().enumerate().map(|(l, &g)| (g, l)).collect();
            let triplets: Vec<(usize, usize, usize)> = self
                .triplets
                .iter()
                .filter_map(|&(h, r, t)| {
                    match (global_to_local.get(&h), global_to_local.get(&t)) {
                        (Some(&lh), Some(&lt)) => Some((lh, r, lt)),
                        _ => None,
                    }
                })
                .collect();
            KnowledgeGraph::new(
                ids.len(),
                self.relation_count,
                self.category_count,
                triplets,
                ids.iter().map(|&g| self.categories[g]).collect(),
                ids.iter().map(|&g| self.entity_descriptions[g].clone()).collect(),
                self.relation_descriptions.clone(),
            )
        };
        Ok(GraphSplit {
            pretrain: build(&pretrain_ids)?,
            unseen: build(&unseen_ids)?,
            pretrain_ids,
            unseen_ids,
        })
    }

    pub fn max_degree_undirected(&self) -> usize {
        (0..self.entity_count).map(|v| self.degree_undirected(v)).max().unwrap_or(0)
    }

    /// Entities that carry a category label.
    pub fn labeled_entities(&self) -> Vec<usize> {
        (0..self.entity_count).filter(|&v| self.categories[v].is_some()).collect()
    }
}

/// Outcome of `split_unseen`; the id lists map local rows back to the
/// original graph and together partition its entity set.
pub struct GraphSplit {
    pub pretrain: KnowledgeGraph,
    pub unseen: KnowledgeGraph,
    pub pretrain_ids: Vec<usize>,
    pub unseen_ids: Vec<usize>,
}

/// File names inside a data directory.
pub const ENTITIES_FILE: &str = "entities.tsv";
pub const RELATIONS_FILE: &str = "relations.tsv";
pub const TRIPLETS_FILE: &str = "triplets.tsv";

/// Writes the three graph files: entities (id, category or "-", description
/// words), relations (id, description words), triplets (head, relation,
/// tail), all tab-separated.
pub fn save_graph(kg: &KnowledgeGraph, vocab: &Vocabulary, dir: &Path) -> Result<()> {
    let mut entities = String::new();
    for e in 0..kg.entity_count {
        let cat = match kg.categories[e] {
            Some(c) => c.to_string(),
            None => "-".to_string(),
        };
        entities.push_str(&format!(
            "{e}\t{cat}\t{}\n",
            vocab.detokenize(&kg.entity_descriptions[e])?
        ));
    }
    let path = dir.join(ENTITIES_FILE);
    fs::write(&path, entities).map_err(|e| Error::io(&path, e))?;

    let mut relations = String::new();
    for r in 0..kg.relation_count {
        relations.push_str(&format!("{r}\t{}\n", vocab.detokenize(&kg.relation_descriptions[r])?));
    }
    let path = dir.join(RELATIONS_FILE);
    fs::write(&path, relations).map_err(|e| Error::io(&path, e))?;

    let mut triplets = String::new();
    for &(h, r, t) in &kg.triplets {
        triplets.push_str(&format!("{h}\t{r}\t{t}\n"));
    }
    let path = dir.join(TRIPLETS_FILE);
    fs::write(&path, triplets).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Loads and validates a graph from a data directory. The category count is
/// the smallest count covering every label present.
pub fn load_graph(dir: &Path, vocab: &Vocabulary) -> Result<KnowledgeGraph> {
    let read = |name: &str| -> Result<(String, String)> {
        let path = dir.join(name);
        let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok((path.display().to_string(), body))
    };

    let (efile, ebody) = read(ENTITIES_FILE)?;
    let mut rows: Vec<(usize, Option<usize>, Vec<usize>)> = Vec::new();
    for (lineno, line) in ebody.lines().enumerate() {
        let parse = |msg: String| Error::Parse { file: efile.clone(), line: lineno + 1, msg };
        let fields: Vec<&str> = line.splitn(3, '\t').collect();
        if fields.len() != 3 {
            return Err(parse("expected id<TAB>category<TAB>description".into()));
        }
        let id: usize = fields[0].parse().map_err(|e| parse(format!("entity id: {e}")))?;
        let category = match fields[1] {
            "-" => None,
            s => Some(s.parse::<usize>().map_err(|e| parse(format!("category: {e}")))?),
        };
        rows.push((id, category, vocab.tokenize(fields[2])));
    }
    let n = rows.len();
    let mut categories = vec![None; n];
    let mut descriptions = vec![Vec::new(); n];
    let mut seen = vec![false; n];
    for (id, cat, desc) in rows {
        if id >= n || seen[id] {
            return Err(Error::Parse {
                file: efile.clone(),
                line: 0,
                msg: format!("entity ids must be a permutation of 0..{n}; bad id {id}"),
            });
        }
        seen[id] = true;
        categories[id] = cat;
        descriptions[id] = desc;
    }

    let (rfile, rbody) = read(RELATIONS_FILE)?;
    let mut rel_rows: Vec<(usize, Vec<usize>)> = Vec::new();
    for (lineno, line) in rbody.lines().enumerate() {
        let parse = |msg: String| Error::Parse { file: rfile.clone(), line: lineno + 1, msg };
        let fields: Vec<&str> = line.splitn(2, '\t').collect();
        if fields.len() != 2 {
            return Err(parse("expected id<TAB>description".into()));
        }
        let id: usize = fields[0].parse().map_err(|e| parse(format!("relation id: {e}")))?;
        rel_rows.push((id, vocab.tokenize(fields[1])));
    }
    let p = rel_rows.len();
    let mut rel_descriptions = vec![Vec::new(); p];
    let mut seen = vec![false; p];
    for (id, desc) in rel_rows {
        if id >= p || seen[id] {
            return Err(Error::Parse {
                file: rfile.clone(),
                line: 0,
                msg: format!("relation ids must be a permutation of 0..{p}; bad id {id}"),
            });
        }
        seen[id] = true;
        rel_descriptions[id] = desc;
    }

    let (tfile, tbody) = read(TRIPLETS_FILE)?;
    let mut triplets = Vec::new();
    for (lineno, line) in tbody.lines().enumerate() {
        let parse = |msg: String| Error::Parse { file: tfile.clone(), line: lineno + 1, msg };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse("expected head<TAB>relation<TAB>tail".into()));
        }
        let nums: std::result::Result<Vec<usize>, _> =
            fields.iter().map(|f| f.parse::<usize>()).collect();
        let nums = nums.map_err(|e| parse(format!("triplet: {e}")))?;
        triplets.push((nums[0], nums[1], nums[2]));
    }

    let category_count = categories.iter().flatten().max().map_or(0, |c| c + 1);
    KnowledgeGraph::new(n, p, category_count, triplets, categories, descriptions, rel_descriptions)
}
