use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Cyclic Jacobi eigensolver, the independent oracle for embed_nodes.
// Returns (eigenvalues, eigenvector columns).
#[allow(clippy::needless_range_loop)]
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p][q] * a[p][q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-15 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let (aip, aiq) = (a[i][p], a[i][q]);
                    a[i][p] = c * aip - s * aiq;
                    a[i][q] = s * aip + c * aiq;
                }
                for i in 0..n {
                    let (api, aqi) = (a[p][i], a[q][i]);
                    a[p][i] = c * api - s * aqi;
                    a[q][i] = s * api + c * aqi;
                }
                for row in &mut v {
                    let (vip, viq) = (row[p], row[q]);
                    row[p] = c * vip - s * viq;
                    row[q] = s * vip + c * viq;
                }
            }
        }
    }
    let vals = (0..n).map(|i| a[i][i]).collect();
    (vals, v)
}

// Oracle embedding with the same selection rule as the implementation but
// built on the Jacobi solver. Eigenvector signs are randomized first, so
// the comparison also proves sign robustness of the |.| construction.
fn oracle_embedding(adj: Vec<Vec<f64>>, d: usize, sign_seed: u64) -> Vec<Vec<f64>> {
    let n = adj.len();
    let (vals, vecs) = jacobi_eigen(adj);
    let mut rng = ChaCha8Rng::seed_from_u64(sign_seed);
    let mut cols: Vec<(f64, Vec<f64>)> = (0..n)
        .filter(|&j| vals[j].abs() > 1e-9)
        .map(|j| {
            let sign = if rng.random_range(0..2) == 0 { 1.0 } else { -1.0 };
            let abs_col = (0..n).map(|i| (sign * vecs[i][j]).abs()).collect();
            (vals[j].abs(), abs_col)
        })
        .collect();
    cols.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| a.1.partial_cmp(&b.1).unwrap())
    });
    cols.truncate(d);
    (0..n)
        .map(|i| {
            let mut row: Vec<f64> = cols.iter().map(|(_, col)| col[i]).collect();
            row.resize(d, 0.0);
            row
        })
        .collect()
}

fn adjacency_of(g: &TopoGraph) -> Vec<Vec<f64>> {
    let n = g.n_nodes();
    let mut adj = vec![vec![0.0; n]; n];
    for &(u, v, _) in g.edges() {
        adj[u][v] = 1.0;
        adj[v][u] = 1.0;
    }
    adj
}

fn binary_graph(n: usize, pairs: &[(usize, usize)]) -> TopoGraph {
    TopoGraph::new(n, pairs.iter().map(|&(u, v)| (u, v, 1.0)).collect(), true).unwrap()
}

fn assert_embedding_close(got: &NodeEmbedding, expect: &[Vec<f64>], tol: f64) {
    assert_eq!(got.n_nodes(), expect.len());
    for (i, row) in got.rows().iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            assert!(
                (x - expect[i][j]).abs() < tol,
                "node {} dim {}: {} vs {}",
                i,
                j,
                x,
                expect[i][j]
            );
        }
    }
}

#[test]
fn two_node_path_embeds_at_inverse_sqrt_two() {
    let g = binary_graph(2, &[(0, 1)]);
    let e = embed_nodes(&g, 3).unwrap();
    let r = 0.5f64.sqrt();
    assert_embedding_close(&e, &[vec![r, r, 0.0], vec![r, r, 0.0]], 1e-9);
}

#[test]
fn edgeless_graph_embeds_at_origin() {
    for n in [1, 3] {
        let g = binary_graph(n, &[]);
        let e = embed_nodes(&g, 4).unwrap();
        for row in e.rows() {
            assert!(row.iter().all(|&x| x == 0.0), "nonzero row {:?}", row);
        }
    }
}

#[test]
fn four_cycle_matches_jacobi_oracle() {
    let g = binary_graph(4, &[(0, 1), (1, 2), (2, 3), (0, 3)]);
    let e = embed_nodes(&g, 4).unwrap();
    let oracle = oracle_embedding(adjacency_of(&g), 4, 9);
    assert_embedding_close(&e, &oracle, 1e-8);
}

#[test]
fn triangle_with_tail_matches_jacobi_oracle() {
    // Non-bipartite, all |eigenvalues| distinct, so column order is forced.
    let g = binary_graph(4, &[(0, 1), (1, 2), (0, 2), (0, 3)]);
    let e = embed_nodes(&g, 4).unwrap();
    let oracle = oracle_embedding(adjacency_of(&g), 4, 41);
    assert_embedding_close(&e, &oracle, 1e-8);
}

#[test]
fn level_zero_is_a_single_cell() {
    let e = embed_nodes(&binary_graph(4, &[(0, 1), (2, 3)]), 3).unwrap();
    let h = build_pyramid(&e, 2);
    assert_eq!(h.level(0).len(), 1);
    assert_eq!(h.total(0), 4);
}

#[test]
fn level_one_splits_at_half() {
    let e = NodeEmbedding::new(1, vec![vec![0.1], vec![0.9]]).unwrap();
    let h = build_pyramid(&e, 1);
    assert_eq!(h.level(1).get(&vec![0]), Some(&1));
    assert_eq!(h.level(1).get(&vec![1]), Some(&1));
}

#[test]
fn coordinate_one_lands_in_last_cell() {
    let e = NodeEmbedding::new(1, vec![vec![1.0]]).unwrap();
    let h = build_pyramid(&e, 2);
    assert_eq!(h.level(2).get(&vec![3]), Some(&1));
}

#[test]
fn identical_histograms_intersect_at_node_count() {
    let e = embed_nodes(&binary_graph(5, &[(0, 1), (1, 2), (3, 4)]), 3).unwrap();
    let h = build_pyramid(&e, 3);
    for l in 0..=3 {
        assert_eq!(histogram_intersection(&h, &h, l).unwrap(), 5);
    }
}

#[test]
fn intersection_arithmetic_example() {
    // Level-2 cells in 1-d: counts [2,0,1,0] vs [1,1,1,0].
    let e1 = NodeEmbedding::new(1, vec![vec![0.1], vec![0.1], vec![0.6]]).unwrap();
    let e2 = NodeEmbedding::new(1, vec![vec![0.1], vec![0.3], vec![0.7]]).unwrap();
    let h1 = build_pyramid(&e1, 2);
    let h2 = build_pyramid(&e2, 2);
    assert_eq!(histogram_intersection(&h1, &h2, 2).unwrap(), 2);
}

#[test]
fn disjoint_supports_intersect_to_zero() {
    let e1 = NodeEmbedding::new(2, vec![vec![0.1, 0.1]]).unwrap();
    let e2 = NodeEmbedding::new(2, vec![vec![0.9, 0.9]]).unwrap();
    let h1 = build_pyramid(&e1, 1);
    let h2 = build_pyramid(&e2, 1);
    assert_eq!(histogram_intersection(&h1, &h2, 1).unwrap(), 0);
}

#[test]
fn self_match_equals_node_count_exactly() {
    for (n, pairs) in [
        (4usize, vec![(0usize, 1usize), (1, 2), (2, 3)]),
        (6, vec![(0, 1), (2, 3), (4, 5), (1, 2)]),
    ] {
        let g = binary_graph(n, &pairs);
        assert_eq!(pyramid_match(&g, &g, 6, 4).unwrap(), n as f64);
    }
}

#[test]
fn empty_graphs_match_to_zero() {
    let g = TopoGraph::new(0, vec![], true).unwrap();
    assert_eq!(pyramid_match(&g, &g, 6, 4).unwrap(), 0.0);
}

fn random_binary_graph(n: usize, seed: u64) -> TopoGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_range(0..2) == 1 {
                pairs.push((u, v));
            }
        }
    }
    binary_graph(n, &pairs)
}

// Dense brute force: materialize full (2^l)^d count arrays and evaluate the
// telescoped sum with explicit powers of one half.
fn dense_histograms(rows: &[Vec<f64>], d: usize, levels: usize) -> Vec<Vec<u64>> {
    (0..=levels)
        .map(|l| {
            let cells = 1usize << l;
            let mut h = vec![0u64; cells.pow(d as u32)];
            for row in rows {
                let mut idx = 0;
                for &x in row {
                    let c = ((x * cells as f64).floor() as usize).min(cells - 1);
                    idx = idx * cells + c;
                }
                h[idx] += 1;
            }
            h
        })
        .collect()
}

fn brute_force_kernel(g1: &TopoGraph, g2: &TopoGraph, d: usize, levels: usize) -> f64 {
    let r1 = embed_nodes(g1, d).unwrap().rows().to_vec();
    let r2 = embed_nodes(g2, d).unwrap().rows().to_vec();
    let h1 = dense_histograms(&r1, d, levels);
    let h2 = dense_histograms(&r2, d, levels);
    let inter: Vec<f64> = (0..=levels)
        .map(|l| {
            h1[l]
                .iter()
                .zip(&h2[l])
                .map(|(&a, &b)| a.min(b))
                .sum::<u64>() as f64
        })
        .collect();
    let mut k = inter[levels];
    for l in 0..levels {
        k += 0.5f64.powi((levels - l) as i32) * (inter[l] - inter[l + 1]);
    }
    k
}

#[test]
fn random_pairs_match_dense_brute_force() {
    for seed in 0..10 {
        let g1 = random_binary_graph(6, seed);
        let g2 = random_binary_graph(6, seed + 100);
        let got = pyramid_match(&g1, &g2, 3, 3).unwrap();
        let expect = brute_force_kernel(&g1, &g2, 3, 3);
        assert!(
            (got - expect).abs() < 1e-12,
            "seed {}: {} vs {}",
            seed,
            got,
            expect
        );
    }
}

#[test]
fn identical_graphs_fill_the_gravity_matrix_with_n() {
    let g = binary_graph(5, &[(0, 1), (1, 2), (3, 4)]);
    let c = gravity_matrix(&[g.clone(), g.clone(), g], 6, 4).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(c.at(i, j), 5.0);
        }
    }
}

#[test]
fn gravity_matrix_matches_pairwise_brute_force() {
    let graphs = [
        random_binary_graph(5, 1),
        random_binary_graph(6, 2),
        random_binary_graph(4, 3),
    ];
    let c = gravity_matrix(&graphs, 3, 3).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            let expect = brute_force_kernel(&graphs[i], &graphs[j], 3, 3);
            assert!((c.at(i, j) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn gravity_matrix_rejects_single_graph() {
    let g = binary_graph(2, &[(0, 1)]);
    assert!(gravity_matrix(&[g], 6, 4).is_err());
}

#[test]
fn embedding_rejects_zero_dimensions() {
    let g = binary_graph(2, &[(0, 1)]);
    assert!(embed_nodes(&g, 0).is_err());
}

#[test]
fn row_sums_include_the_diagonal() {
    let graphs = [
        random_binary_graph(5, 7),
        random_binary_graph(5, 8),
        random_binary_graph(5, 9),
    ];
    let c = gravity_matrix(&graphs, 3, 3).unwrap();
    let sums = c.row_sums();
    for (i, &sum) in sums.iter().enumerate() {
        let expect: f64 = (0..3).map(|j| c.at(i, j)).sum();
        assert_eq!(sum, expect);
        assert_eq!(c.row_means()[i], expect / 3.0);
    }
}

// Gram positive semidefiniteness over a pool of random graphs, checked with
// the Jacobi solver.
#[test]
fn kernel_gram_matrix_is_positive_semidefinite() {
    let graphs: Vec<TopoGraph> = (0..20)
        .map(|s| random_binary_graph(3 + (s as usize % 4), 500 + s))
        .collect();
    let c = gravity_matrix(&graphs, 4, 3).unwrap();
    let gram: Vec<Vec<f64>> = (0..20)
        .map(|i| (0..20).map(|j| c.at(i, j)).collect())
        .collect();
    let (vals, _) = jacobi_eigen(gram);
    let max = vals.iter().cloned().fold(f64::MIN, f64::max);
    let min = vals.iter().cloned().fold(f64::MAX, f64::min);
    assert!(
        min >= -1e-8 * max.abs(),
        "min eigenvalue {} vs max {}",
        min,
        max
    );
}

proptest! {
    #[test]
    fn per_level_totals_equal_node_count(
        rows in proptest::collection::vec(
            proptest::collection::vec(0.0f64..=1.0, 3), 0..12),
    ) {
        let n = rows.len();
        let e = NodeEmbedding::new(3, rows).unwrap();
        let h = build_pyramid(&e, 4);
        for l in 0..=4 {
            prop_assert_eq!(h.total(l), n as u64);
        }
    }

    #[test]
    fn kernel_is_bit_exactly_symmetric(s1 in 0u64..200, s2 in 0u64..200, n1 in 2usize..7, n2 in 2usize..7) {
        let g1 = random_binary_graph(n1, s1);
        let g2 = random_binary_graph(n2, 1000 + s2);
        let a = pyramid_match(&g1, &g2, 4, 3).unwrap();
        let b = pyramid_match(&g2, &g1, 4, 3).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn self_match_dominates_smaller_graphs(s1 in 0u64..200, s2 in 0u64..200, n1 in 2usize..7, n2 in 2usize..7) {
        prop_assume!(n2 <= n1);
        let g1 = random_binary_graph(n1, s1);
        let g2 = random_binary_graph(n2, 3000 + s2);
        let self_match = pyramid_match(&g1, &g1, 4, 3).unwrap();
        let cross = pyramid_match(&g1, &g2, 4, 3).unwrap();
        prop_assert!(self_match >= cross);
    }

    #[test]
    fn intersections_shrink_with_level(s1 in 0u64..200, s2 in 0u64..200, n1 in 2usize..7, n2 in 2usize..7) {
        let g1 = random_binary_graph(n1, s1);
        let g2 = random_binary_graph(n2, 2000 + s2);
        let h1 = build_pyramid(&embed_nodes(&g1, 4).unwrap(), 4);
        let h2 = build_pyramid(&embed_nodes(&g2, 4).unwrap(), 4);
        for l in 0..4 {
            let coarse = histogram_intersection(&h1, &h2, l).unwrap();
            let fine = histogram_intersection(&h1, &h2, l + 1).unwrap();
            prop_assert!(coarse >= fine, "level {}: {} < {}", l, coarse, fine);
        }
    }

    #[test]
    fn gravity_matrix_is_symmetric_with_node_count_diagonal(seed in 0u64..100, k in 2usize..6) {
        let graphs: Vec<TopoGraph> = (0..k)
            .map(|i| random_binary_graph(2 + (i % 4), seed * 31 + i as u64))
            .collect();
        let c = gravity_matrix(&graphs, 4, 3).unwrap();
        for (i, g) in graphs.iter().enumerate() {
            prop_assert_eq!(c.at(i, i), g.n_nodes() as f64);
            for j in 0..k {
                prop_assert_eq!(c.at(i, j), c.at(j, i));
                prop_assert!(c.at(i, j) >= 0.0);
            }
        }
    }
}
