//! Maximal clique enumeration (Bron–Kerbosch with Tomita pivoting) over
//! word-packed bitsets.

use super::similarity::SimilarityGraph;

#[derive(Clone)]
struct Bits(Vec<u64>);

impl Bits {
    fn full(n: usize) -> Self {
        let mut words = vec![u64::MAX; n.div_ceil(64)];
        if !n.is_multiple_of(64) {
            if let Some(last) = words.last_mut() {
                *last = (1u64 << (n % 64)) - 1;
            }
        }
        Bits(words)
    }

    fn empty(n: usize) -> Self {
        Bits(vec![0; n.div_ceil(64)])
    }

    fn is_empty(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }

    fn and(&self, other: &[u64]) -> Self {
        Bits(self.0.iter().zip(other).map(|(a, b)| a & b).collect())
    }

    fn and_not(&self, other: &[u64]) -> Self {
        Bits(self.0.iter().zip(other).map(|(a, b)| a & !b).collect())
    }

    fn count_and(&self, other: &[u64]) -> u32 {
        self.0.iter().zip(other).map(|(a, b)| (a & b).count_ones()).sum()
    }

    fn insert(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn remove(&mut self, i: usize) {
        self.0[i / 64] &= !(1 << (i % 64));
    }

    fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().flat_map(|(wi, &w)| {
            let mut word = w;
            std::iter::from_fn(move || {
                if word == 0 {
                    return None;
                }
                let bit = word.trailing_zeros() as usize;
                word &= word - 1;
                Some(wi * 64 + bit)
            })
        })
    }
}

/// All maximal cliques of `graph`, each sorted ascending. The list is
/// ordered by size descending, then lexicographically (smallest member
/// first). An isolated node is its own maximal clique.
pub fn maximal_cliques(graph: &SimilarityGraph) -> Vec<Vec<usize>> {
    let n = graph.node_count();
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut r = Vec::new();
    expand(graph, &mut r, Bits::full(n), Bits::empty(n), &mut out);
    for c in &mut out {
        c.sort_unstable();
    }
    out.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    out
}

fn expand(
    graph: &SimilarityGraph,
    r: &mut Vec<usize>,
    mut p: Bits,
    mut x: Bits,
    out: &mut Vec<Vec<usize>>,
) {
    if p.is_empty() {
        if x.is_empty() {
            out.push(r.clone());
        }
        return;
    }
    // pivot: the vertex of P ∪ X with most neighbours in P
    let pivot = p
        .iter()
        .chain(x.iter())
        .max_by_key(|&u| p.count_and(graph.neighbors(u)))
        .expect("P is non-empty");
    let candidates: Vec<usize> = p.and_not(graph.neighbors(pivot)).iter().collect();
    for v in candidates {
        let nv = graph.neighbors(v);
        r.push(v);
        expand(graph, r, p.and(nv), x.and(nv), out);
        r.pop();
        p.remove(v);
        x.insert(v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle() {
        let g = SimilarityGraph::new(3, [(0, 1), (1, 2), (0, 2)], 0.0);
        assert_eq!(maximal_cliques(&g), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn path() {
        let g = SimilarityGraph::new(3, [(0, 1), (1, 2)], 0.0);
        assert_eq!(maximal_cliques(&g), vec![vec![0, 1], vec![1, 2]]);
    }

    #[test]
    fn edgeless() {
        let g = SimilarityGraph::new(3, [], 0.0);
        assert_eq!(maximal_cliques(&g), vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn empty_graph() {
        assert!(maximal_cliques(&SimilarityGraph::new(0, [], 0.0)).is_empty());
    }

    #[test]
    fn spans_multiple_words() {
        let n = 130;
        let edges: Vec<_> = (0..n)
            .flat_map(|a| ((a + 1)..n).map(move |b| (a, b)))
            .filter(|&(a, b)| (a < 65) == (b < 65))
            .collect();
        let g = SimilarityGraph::new(n, edges, 0.0);
        let cliques = maximal_cliques(&g);
        assert_eq!(cliques.len(), 2);
        assert_eq!(cliques[0], (0..65).collect::<Vec<_>>());
        assert_eq!(cliques[1], (65..130).collect::<Vec<_>>());
    }
}
