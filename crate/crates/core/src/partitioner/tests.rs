use super::*;
use rand::Rng;
use proptest::prelude::*;

fn path(densities: &[f64]) -> RoadGraph {
    let edges: Vec<(usize, usize)> = (1..densities.len()).map(|i| (i - 1, i)).collect();
    RoadGraph::new(densities.to_vec(), &edges).unwrap()
}

/// Two cliques of four joined by the edge (3, 4).
fn dumbbell(eps: f64) -> RoadGraph {
    let mut edges = Vec::new();
    for side in [0, 4] {
        for a in 0..4 {
            for b in a + 1..4 {
                edges.push((side + a, side + b));
            }
        }
    }
    edges.push((3, 4));
    let d = vec![1.0 - eps, 1.0 + eps, 1.0, 1.0 + 2.0 * eps, 9.0, 9.0 - eps, 9.0 + eps, 9.0 - 2.0 * eps];
    RoadGraph::new(d, &edges).unwrap()
}

/// Two random connected communities bridged by one or two edges, with
/// densities around two levels.
fn two_level(seed: u64, n: usize) -> (RoadGraph, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng.gen_range(n / 2 - 1..=n / 2 + 1);
    let mut edges = Vec::new();
    let mut truth = vec![0; n];
    for (lo, hi, label) in [(0, a, 0), (a, n, 1)] {
        for r in lo + 1..hi {
            edges.push((rng.gen_range(lo..r), r));
            truth[r] = label;
        }
        truth[lo] = label;
        for _ in 0..(hi - lo) / 2 {
            let (x, y) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
            edges.push((x, y));
        }
    }
    for _ in 0..rng.gen_range(1..=2) {
        edges.push((rng.gen_range(0..a), rng.gen_range(a..n)));
    }
    let d = (0..n).map(|r| (if truth[r] == 0 { 10.0 } else { 30.0 }) + rng.gen_range(-1.5..1.5)).collect();
    (RoadGraph::new(d, &edges).unwrap(), truth)
}

/// Minimum within-region squared deviation over all splits into two
/// nonempty connected parts.
fn exhaustive_two_partition(graph: &RoadGraph) -> Vec<usize> {
    let n = graph.len();
    let mut best = (f64::INFINITY, vec![]);
    // road 0 stays in part 0 to skip mirrored splits
    for mask in 0u32..(1 << (n - 1)) {
        let labels: Vec<usize> = (0..n).map(|r| if r == 0 { 0 } else { (mask >> (r - 1) & 1) as usize }).collect();
        let ones = labels.iter().filter(|&&l| l == 1).count();
        if ones == 0 {
            continue;
        }
        let connected = (0..2).all(|g| graph.components(&labels.iter().map(|&l| l == g).collect::<Vec<_>>()).len() == 1);
        if !connected {
            continue;
        }
        let sse = within_region_sse(graph, &labels);
        if sse < best.0 {
            best = (sse, labels);
        }
    }
    best.1
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

#[test]
fn constant_field_snakes_follow_lowest_ids() {
    let g = RoadGraph::new(vec![5.0; 5], &[(0, 1), (0, 2), (1, 3), (2, 4)]).unwrap();
    let s = run_snakes(&g, 5).unwrap();
    assert_eq!(s.snakes[0], vec![0, 1, 2, 3, 4]);
    assert_eq!(s.snakes[4], vec![4, 2, 0, 1, 3]);
    assert!(s.diagnostics.is_empty());
}

#[test]
fn path_snake_prefers_equal_density() {
    let s = run_snakes(&path(&[1.0, 1.0, 9.0]), 2).unwrap();
    assert_eq!(s.snakes[0], vec![0, 1]);
}

#[test]
fn dumbbell_snakes_exhaust_own_side_first() {
    let g = dumbbell(0.01);
    let s = run_snakes(&g, 8).unwrap();
    for (x, snake) in s.snakes.iter().enumerate() {
        let side = x / 4;
        assert!(snake[..4].iter().all(|&r| r / 4 == side), "snake {x}: {snake:?}");
    }
}

#[test]
fn snake_structure_is_valid() {
    let (g, _) = two_level(5, 12);
    let s = run_snakes(&g, 7).unwrap();
    for (x, snake) in s.snakes.iter().enumerate() {
        assert_eq!(snake[0], x);
        assert_eq!(snake.len(), 7);
        let mut seen = snake.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 7);
        for k in 1..snake.len() {
            assert!(snake[..k].iter().any(|&r| g.neighbors_of(r).contains(&snake[k])));
        }
    }
}

#[test]
fn disconnected_snakes_are_truncated() {
    let g = RoadGraph::new(vec![1.0, 2.0, 3.0, 4.0], &[(0, 1), (2, 3)]).unwrap();
    let s = run_snakes(&g, 3).unwrap();
    assert_eq!(s.snakes[0], vec![0, 1]);
    assert_eq!(s.diagnostics.len(), 4);
    assert!(matches!(run_snakes(&g, 5), Err(Error::Argument(_))));
    assert!(matches!(run_snakes(&g, 0), Err(Error::Argument(_))));
}

#[test]
fn similarity_hand_values() {
    let phi: f64 = 0.5;
    // identical snakes: sum_k phi^(n-k) k
    let same = SnakeSet { snakes: vec![vec![0, 1, 2], vec![0, 1, 2], vec![3, 2, 1], vec![3, 0, 1]], diagnostics: vec![] };
    let w = compute_similarity(&same, phi, 3).unwrap();
    assert!((w[(0, 1)] - 2.125).abs() < 1e-12);
    assert!((w[(0, 0)] - (phi.powi(3) + 2.0 * phi.powi(2) + 3.0 * phi)).abs() < 1e-12);
    // disjoint snakes
    let disjoint = SnakeSet { snakes: vec![vec![0, 1], vec![2, 3], vec![2, 3], vec![0, 1]], diagnostics: vec![] };
    let w = compute_similarity(&disjoint, phi, 2).unwrap();
    assert_eq!(w[(0, 1)], 0.0);
    // partial overlap: {0,1,2} vs {3,2,1}: k=2 shares nothing, k=3 shares {1,2}
    let w = compute_similarity(&same, phi, 3).unwrap();
    assert!((w[(0, 2)] - 2.0 * phi).abs() < 1e-12);
    assert!(matches!(compute_similarity(&same, 1.0, 3), Err(Error::Argument(_))));
    assert!(matches!(compute_similarity(&same, 0.0, 3), Err(Error::Argument(_))));
}

#[test]
fn similarity_is_symmetric_with_maximal_diagonal() {
    let (g, _) = two_level(11, 12);
    let s = run_snakes(&g, 6).unwrap();
    let w = compute_similarity(&s, 0.7, 6).unwrap();
    assert_eq!(w, w.transpose());
    for i in 0..12 {
        assert!((0..12).all(|j| w[(i, j)] <= w[(i, i)] + 1e-12));
    }
}

#[test]
fn block_diagonal_similarity_is_recovered() {
    let mut w = DMatrix::zeros(6, 6);
    for i in 0..6 {
        for j in 0..6 {
            if (i < 3) == (j < 3) {
                w[(i, j)] = 1.0;
            }
        }
    }
    let r = symnmf(&w, &SymNmfOptions::new(2, 1)).unwrap();
    assert!(same_partition(&r.assignment, &[0, 0, 0, 1, 1, 1]));
    assert_ne!(r.assignment[0], r.assignment[3]);
}

#[test]
fn single_cluster_and_too_many_clusters() {
    let w = DMatrix::from_element(3, 3, 1.0);
    assert_eq!(symnmf(&w, &SymNmfOptions::new(1, 0)).unwrap().assignment, vec![0, 0, 0]);
    assert!(matches!(symnmf(&w, &SymNmfOptions::new(4, 0)), Err(Error::Argument(_))));
    let g = path(&[1.0, 2.0, 3.0]);
    assert!(matches!(partition(&g, 2, 0.5, &SymNmfOptions::new(4, 0)), Err(Error::Argument(_))));
}

#[test]
fn normalization_variants() {
    let w = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 4.0]);
    let s = normalize(&w, Normalization::Symmetric);
    assert_eq!(s, s.transpose());
    assert!((s[(0, 1)] - 1.0 / (3.0f64 * 5.0).sqrt()).abs() < 1e-15);
    let a = normalize(&w, Normalization::Asymmetric);
    assert!((a[(0, 1)] - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_ne!(a, a.transpose());
}

#[test]
fn twelve_road_fixture_matches_exhaustive_oracle() {
    let (g, truth) = two_level(3, 12);
    let oracle = exhaustive_two_partition(&g);
    assert!(same_partition(&oracle, &truth));
    let p = partition(&g, 6, 0.5, &SymNmfOptions::new(2, 9)).unwrap();
    assert!(same_partition(&p.assignment, &oracle), "{:?} vs {oracle:?}", p.assignment);
}

#[test]
fn regions_are_homogeneous() {
    let (g, _) = two_level(8, 12);
    let p = partition(&g, 6, 0.5, &SymNmfOptions::new(2, 2)).unwrap();
    let d = g.densities();
    let mean = |g: usize| {
        let v: Vec<f64> = (0..12).filter(|&r| p.assignment[r] == g).map(|r| d[r]).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let overall = d.iter().sum::<f64>() / 12.0;
    let between: f64 = (0..12).map(|r| (mean(p.assignment[r]) - overall).powi(2)).sum::<f64>() / 12.0;
    let within = within_region_sse(&g, &p.assignment) / 12.0;
    assert!(within <= between, "within {within} between {between}");
}

#[test]
fn repair_moves_stray_fragment() {
    let g = path(&[1.0, 1.0, 1.0, 5.0, 5.0]);
    let mut a = vec![0, 0, 1, 1, 0];
    let moved = repair_connectivity(&g, &mut a);
    assert_eq!(moved, 1);
    assert_eq!(a, vec![0, 0, 1, 1, 1]);
    for region in 0..2 {
        assert_eq!(g.components(&a.iter().map(|&x| x == region).collect::<Vec<_>>()).len(), 1);
    }
}

#[test]
fn graph_csv_round_trip_and_errors() {
    let (g, _) = two_level(2, 10);
    let (mut r, mut e) = (Vec::new(), Vec::new());
    write_graph(&g, &mut r, &mut e).unwrap();
    assert_eq!(read_graph(r.as_slice(), e.as_slice()).unwrap(), g);
    let bad = "road_id,density\n0,1.0\n1,abc\n";
    match read_graph(bad.as_bytes(), "road_a,road_b\n".as_bytes()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("unexpected {other:?}"),
    }
    let mut out = Vec::new();
    write_assignment(&[0, 1, 1], &mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap(), "road_id,region\n0,0\n1,1\n2,1\n");
}

#[test]
fn partition_is_deterministic() {
    let (g, _) = two_level(4, 12);
    let opts = SymNmfOptions::new(2, 5);
    assert_eq!(partition(&g, 6, 0.5, &opts).unwrap(), partition(&g, 6, 0.5, &opts).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn symnmf_objective_never_increases(seed in 0u64..1000, k in 2usize..4) {
        let (g, _) = two_level(seed, 12);
        let s = run_snakes(&g, 6).unwrap();
        let w = compute_similarity(&s, 0.5, 6).unwrap();
        let r = symnmf(&w, &SymNmfOptions::new(k, seed)).unwrap();
        for pair in r.objective.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-12, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn relabeling_roads_permutes_the_partition(seed in 0u64..1000, shuffle in 0u64..1000) {
        let (g, _) = two_level(seed, 10);
        let mut perm: Vec<usize> = (0..10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle);
        for i in (1..10).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        // road r of g becomes road perm[r]
        let mut d = vec![0.0; 10];
        for r in 0..10 {
            d[perm[r]] = g.densities()[r];
        }
        let edges: Vec<(usize, usize)> = g.edges().iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let h = RoadGraph::new(d, &edges).unwrap();
        let sa = run_snakes(&g, 5).unwrap();
        let sb = run_snakes(&h, 5).unwrap();
        for r in 0..10 {
            let mapped: Vec<usize> = sa.snakes[r].iter().map(|&x| perm[x]).collect();
            prop_assert_eq!(&mapped, &sb.snakes[perm[r]]);
        }
        let wa = compute_similarity(&sa, 0.5, 5).unwrap();
        let wb = compute_similarity(&sb, 0.5, 5).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                prop_assert!((wa[(i, j)] - wb[(perm[i], perm[j])]).abs() < 1e-12);
            }
        }
        let pa = partition(&g, 5, 0.5, &SymNmfOptions::new(2, 1)).unwrap();
        let pb = partition(&h, 5, 0.5, &SymNmfOptions::new(2, 1)).unwrap();
        let mapped: Vec<usize> = (0..10).map(|r| pb.assignment[perm[r]]).collect();
        prop_assert!(same_partition(&pa.assignment, &mapped));
    }
}

