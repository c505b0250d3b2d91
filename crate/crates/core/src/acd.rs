//! Agglomerative contextual decomposition: grow a hierarchy of contiguous
//! feature groups, joining the pair with the largest CD interaction.

use std::collections::{BTreeMap, HashMap};

use serde_json::{json, Value};

use crate::cd::FeatureGroup;
use crate::error::{Error, Result};
use crate::network::Network;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Neighbor relation over units. Each unit covers a fixed set of input
/// coordinates (a token's embedding row, a pixel's channels).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    input_shape: Vec<usize>,
    units: Vec<Vec<usize>>,
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    /// 1-D chain over the coordinates of a `[len]` input.
    pub fn chain(len: usize) -> Self {
        let mut a = Self::sequence(len, len, 1);
        a.input_shape = vec![len];
        a
    }

    /// Chain over the first `len` rows of a `[steps, features]` input; each
    /// unit is one row. Rows past `len` are never grouped.
    pub fn sequence(len: usize, steps: usize, features: usize) -> Self {
        let len = len.min(steps);
        let units = (0..len).map(|t| (t * features..(t + 1) * features).collect()).collect();
        let neighbors = (0..len)
            .map(|t| {
                let mut n = Vec::new();
                if t > 0 {
                    n.push(t - 1);
                }
                if t + 1 < len {
                    n.push(t + 1);
                }
                n
            })
            .collect();
        Self { input_shape: vec![steps, features], units, neighbors }
    }

    /// 4-neighborhood over the pixels of a `[channels, height, width]` input;
    /// each unit covers one pixel across all channels.
    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        let plane = height * width;
        let units = (0..plane).map(|p| (0..channels).map(|c| c * plane + p).collect()).collect();
        let neighbors = (0..plane)
            .map(|p| {
                let (r, c) = (p / width, p % width);
                let mut n = Vec::new();
                if r > 0 {
                    n.push(p - width);
                }
                if c > 0 {
                    n.push(p - 1);
                }
                if c + 1 < width {
                    n.push(p + 1);
                }
                if r + 1 < height {
                    n.push(p + width);
                }
                n
            })
            .collect();
        Self { input_shape: vec![channels, height, width], units, neighbors }
    }

    /// 4-neighborhood over a `[height, width]` input.
    pub fn grid(height: usize, width: usize) -> Self {
        let mut a = Self::image(1, height, width);
        a.input_shape = vec![height, width];
        a
    }

    /// Reinterpret the same units over a differently shaped input with the
    /// same number of coordinates.
    pub fn with_input_shape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != numel(&self.input_shape) {
            return Err(Error::shape("adjacency", format!("{:?} vs {:?}", shape, self.input_shape)));
        }
        self.input_shape = shape.to_vec();
        Ok(self)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_units(&self) -> usize {
        self.units.len()
    }

    pub fn unit_coordinates(&self, unit: usize) -> &[usize] {
        &self.units[unit]
    }

    pub fn neighbors(&self, unit: usize) -> &[usize] {
        &self.neighbors[unit]
    }

    pub fn are_adjacent(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].contains(&b)
    }

    pub fn group(&self, units: &[usize]) -> FeatureGroup {
        let mut mask = vec![false; numel(&self.input_shape)];
        for &u in units {
            for &c in &self.units[u] {
                mask[c] = true;
            }
        }
        FeatureGroup::new(&self.input_shape, mask).expect("mask sized to input")
    }

    /// Units fully covered by `group`.
    pub fn units_of(&self, group: &FeatureGroup) -> Vec<usize> {
        (0..self.units.len())
            .filter(|&u| self.units[u].iter().all(|&c| group.contains(c)))
            .collect()
    }

    /// Whether `units` form one connected piece.
    pub fn is_contiguous(&self, units: &[usize]) -> bool {
        let Some(&start) = units.first() else { return false };
        let mut seen = vec![start];
        let mut frontier = vec![start];
        while let Some(u) = frontier.pop() {
            for &v in &self.neighbors[u] {
                if units.contains(&v) && !seen.contains(&v) {
                    seen.push(v);
                    frontier.push(v);
                }
            }
        }
        seen.len() == units.len()
    }
}

/// One unit added to `group` for every unit adjacent to it, in unit order.
pub fn candidate_groups(group: &FeatureGroup, adjacency: &Adjacency) -> Vec<FeatureGroup> {
    let inside = adjacency.units_of(group);
    let mut border: Vec<usize> = inside
        .iter()
        .flat_map(|&u| adjacency.neighbors(u).iter().copied())
        .filter(|v| !inside.contains(v))
        .collect();
    border.sort_unstable();
    border.dedup();
    border
        .into_iter()
        .map(|v| {
            let mut units = inside.clone();
            units.push(v);
            adjacency.group(&units)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchyNode<T> {
    /// Sorted unit indices.
    pub units: Vec<usize>,
    pub group: FeatureGroup,
    /// CD `β` at the target class.
    pub score: T,
    /// Indices into [`Hierarchy::nodes`].
    pub children: Vec<usize>,
    pub level: usize,
}

/// One agglomeration step.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeStep<T> {
    pub level: usize,
    /// Nodes admitted as growth seeds at this step.
    pub admitted: Vec<usize>,
    /// Every candidate considered as `(seed node, neighbor node, interaction)`.
    pub candidates: Vec<(usize, usize, T)>,
    pub merged: usize,
    pub interaction: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy<T> {
    pub nodes: Vec<HierarchyNode<T>>,
    /// Nodes with no parent (a single root unless capped by `max_levels`).
    pub roots: Vec<usize>,
    pub steps: Vec<MergeStep<T>>,
    pub class_index: usize,
    pub k_percent: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcdConfig {
    pub class_index: usize,
    pub k_percent: f64,
    pub max_levels: Option<usize>,
}

impl Default for AcdConfig {
    fn default() -> Self {
        Self { class_index: 0, k_percent: 5.0, max_levels: None }
    }
}

/// Scores closer than this (relative) are ties.
const TIE_TOLERANCE: f64 = 1e-9;

fn nearly_equal<T: Scalar>(a: T, b: T) -> bool {
    let (a, b) = (a.as_f64(), b.as_f64());
    (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

/// Lowest smallest unit first, then lexicographic.
fn tie_key(units: &[usize]) -> (usize, Vec<usize>) {
    (units.first().copied().unwrap_or(usize::MAX), units.to_vec())
}

struct Scorer<'a, T: Scalar> {
    net: &'a Network<T>,
    x: &'a Tensor<T>,
    adjacency: &'a Adjacency,
    class_index: usize,
    cache: HashMap<Vec<usize>, T>,
}

impl<T: Scalar> Scorer<'_, T> {
    fn score_all(&mut self, unit_sets: &[Vec<usize>]) -> Result<()> {
        let mut todo: Vec<Vec<usize>> = unit_sets.iter().filter(|u| !self.cache.contains_key(*u)).cloned().collect();
        todo.sort();
        todo.dedup();
        if todo.is_empty() {
            return Ok(());
        }
        let groups: Vec<FeatureGroup> = todo.iter().map(|u| self.adjacency.group(u)).collect();
        let pair = self.net.cd_groups(self.x, &groups)?;
        let k = self.net.num_classes();
        for (i, units) in todo.into_iter().enumerate() {
            self.cache.insert(units, pair.beta.data()[i * k + self.class_index]);
        }
        Ok(())
    }

    fn score(&self, units: &[usize]) -> T {
        self.cache[units]
    }
}

fn merged(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut u: Vec<usize> = a.iter().chain(b).copied().collect();
    u.sort_unstable();
    u
}

/// Build the hierarchy for one input.
///
/// Each step admits the current groups scoring within `k%` of the best, pairs
/// every admitted group with each adjacent group, and merges the pair with
/// the largest interaction `β(a ∪ b) − β(a) − β(b)`.
pub fn build_hierarchy<T: Scalar>(
    net: &Network<T>,
    x: &Tensor<T>,
    adjacency: &Adjacency,
    config: &AcdConfig,
) -> Result<Hierarchy<T>> {
    let k = config.k_percent;
    if !(k > 0.0 && k <= 100.0) {
        return Err(Error::invalid(format!("k_percent must lie in (0, 100], got {k}")));
    }
    if adjacency.num_units() == 0 {
        return Err(Error::invalid("input has no units to group"));
    }
    if adjacency.input_shape() != net.input_shape() || x.shape() != net.input_shape() {
        return Err(Error::shape(
            "acd",
            format!("adjacency {:?}, input {:?}, network {:?}", adjacency.input_shape(), x.shape(), net.input_shape()),
        ));
    }
    if config.class_index >= net.num_classes() {
        return Err(Error::invalid(format!("class {} out of range", config.class_index)));
    }
    let mut scorer = Scorer { net, x, adjacency, class_index: config.class_index, cache: HashMap::new() };
    let singletons: Vec<Vec<usize>> = (0..adjacency.num_units()).map(|u| vec![u]).collect();
    scorer.score_all(&singletons)?;

    let mut nodes: Vec<HierarchyNode<T>> = singletons
        .into_iter()
        .map(|units| HierarchyNode {
            score: scorer.score(&units),
            group: adjacency.group(&units),
            units,
            children: Vec::new(),
            level: 0,
        })
        .collect();
    // unit -> node currently containing it
    let mut owner: Vec<usize> = (0..adjacency.num_units()).collect();
    let mut current: Vec<usize> = (0..adjacency.num_units()).collect();
    let mut steps = Vec::new();
    let max_levels = config.max_levels.unwrap_or(usize::MAX);

    while current.len() > 1 && steps.len() < max_levels {
        let best = current.iter().map(|&n| nodes[n].score).fold(T::neg_infinity(), T::max);
        let threshold = best - T::lit(k / 100.0) * best.abs();
        let admitted: Vec<usize> = current.iter().copied().filter(|&n| nodes[n].score >= threshold).collect();

        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for &a in &admitted {
            let mut near: Vec<usize> = nodes[a]
                .units
                .iter()
                .flat_map(|&u| adjacency.neighbors(u).iter().map(|&v| owner[v]))
                .filter(|&b| b != a)
                .collect();
            near.sort_unstable();
            near.dedup();
            pairs.extend(near.into_iter().map(|b| (a, b)));
        }
        if pairs.is_empty() {
            break;
        }
        let unions: Vec<Vec<usize>> = pairs.iter().map(|&(a, b)| merged(&nodes[a].units, &nodes[b].units)).collect();
        scorer.score_all(&unions)?;

        let candidates: Vec<(usize, usize, T)> = pairs
            .iter()
            .zip(&unions)
            .map(|(&(a, b), u)| (a, b, scorer.score(u) - nodes[a].score - nodes[b].score))
            .collect();
        let mut choice = 0;
        for (i, c) in candidates.iter().enumerate().skip(1) {
            let best = &candidates[choice];
            let better = if nearly_equal(c.2, best.2) {
                tie_key(&unions[i]) < tie_key(&unions[choice])
            } else {
                c.2 > best.2
            };
            if better {
                choice = i;
            }
        }
        let (a, b, interaction) = candidates[choice];
        let units = unions[choice].clone();
        let id = nodes.len();
        let level = steps.len() + 1;
        nodes.push(HierarchyNode {
            score: scorer.score(&units),
            group: adjacency.group(&units),
            units: units.clone(),
            children: vec![a, b],
            level,
        });
        for &u in &units {
            owner[u] = id;
        }
        current.retain(|&n| n != a && n != b);
        current.push(id);
        current.sort_by_key(|&n| nodes[n].units[0]);
        steps.push(MergeStep { level, admitted, candidates, merged: id, interaction });
    }
    Ok(Hierarchy { nodes, roots: current, steps, class_index: config.class_index, k_percent: k })
}

impl<T: Scalar> Hierarchy<T> {
    fn node_json(&self, id: usize) -> Value {
        let n = &self.nodes[id];
        json!({
            "units": n.units,
            "coordinates": n.group.indices(),
            "score": n.score.as_f64(),
            "level": n.level,
            "children": n.children.iter().map(|&c| self.node_json(c)).collect::<Vec<_>>(),
        })
    }

    /// Nested JSON tree rooted at each root.
    pub fn to_json(&self) -> Value {
        json!({
            "class_index": self.class_index,
            "k_percent": self.k_percent,
            "roots": self.roots.iter().map(|&r| self.node_json(r)).collect::<Vec<_>>(),
        })
    }

    /// First merged (non-singleton) group.
    pub fn first_merge(&self) -> Option<&HierarchyNode<T>> {
        self.steps.first().map(|s| &self.nodes[s.merged])
    }
}

/// Mean score of one literal pattern across a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternScore {
    pub pattern: Vec<String>,
    pub mean_score: f64,
    pub count: usize,
}

/// One input with a label per unit (tokens for text).
pub struct LabeledInput<'a, T> {
    pub x: &'a Tensor<T>,
    pub adjacency: &'a Adjacency,
    pub unit_labels: &'a [String],
}

/// Build a hierarchy per input and pool node scores by the literal label
/// sequence of each node's units. Patterns seen fewer than `min_count` times
/// are dropped; the rest are sorted by mean score, highest first.
pub fn aggregate_group_scores<T: Scalar>(
    net: &Network<T>,
    dataset: &[LabeledInput<'_, T>],
    config: &AcdConfig,
    min_count: usize,
) -> Result<Vec<PatternScore>> {
    let mut pooled: BTreeMap<Vec<String>, (f64, usize)> = BTreeMap::new();
    for item in dataset {
        if item.unit_labels.len() != item.adjacency.num_units() {
            return Err(Error::invalid(format!(
                "{} labels for {} units",
                item.unit_labels.len(),
                item.adjacency.num_units()
            )));
        }
        let h = build_hierarchy(net, item.x, item.adjacency, config)?;
        for node in &h.nodes {
            let pattern: Vec<String> = node.units.iter().map(|&u| item.unit_labels[u].clone()).collect();
            let e = pooled.entry(pattern).or_insert((0.0, 0));
            e.0 += node.score.as_f64();
            e.1 += 1;
        }
    }
    let mut table: Vec<PatternScore> = pooled
        .into_iter()
        .filter(|(_, (_, c))| *c >= min_count)
        .map(|(pattern, (sum, count))| PatternScore { pattern, mean_score: sum / count as f64, count })
        .collect();
    table.sort_by(|a, b| b.mean_score.total_cmp(&a.mean_score).then_with(|| a.pattern.cmp(&b.pattern)));
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_candidates() {
        let adj = Adjacency::chain(5);
        let c = candidate_groups(&adj.group(&[2]), &adj);
        assert_eq!(c.iter().map(|g| g.indices()).collect::<Vec<_>>(), vec![vec![1, 2], vec![2, 3]]);
        assert!(candidate_groups(&adj.group(&[0, 1, 2, 3, 4]), &adj).is_empty());
    }

    #[test]
    fn grid_candidates() {
        let adj = Adjacency::grid(2, 2);
        let c = candidate_groups(&adj.group(&[0]), &adj);
        assert_eq!(c.iter().map(|g| g.indices()).collect::<Vec<_>>(), vec![vec![0, 1], vec![0, 2]]);
    }

    #[test]
    fn adjacency_is_symmetric_and_irreflexive() {
        for adj in [Adjacency::chain(6), Adjacency::grid(3, 4), Adjacency::image(2, 3, 3), Adjacency::sequence(4, 6, 3)] {
            for u in 0..adj.num_units() {
                assert!(!adj.are_adjacent(u, u));
                for &v in adj.neighbors(u) {
                    assert!(adj.are_adjacent(v, u));
                }
            }
        }
    }

    #[test]
    fn sequence_units_cover_rows() {
        let adj = Adjacency::sequence(2, 4, 3);
        assert_eq!(adj.input_shape(), &[4, 3]);
        assert_eq!(adj.unit_coordinates(1), &[3, 4, 5]);
        assert_eq!(adj.num_units(), 2);
    }
}
