use super::*;
use proptest::prelude::*;
use std::collections::BTreeSet;

fn labels_of(ds: &Dataset) -> &[usize] {
    match &ds.targets {
        Targets::Classes(l) => l,
        Targets::Masks(_) => panic!("expected class targets"),
    }
}

#[test]
fn classification_far_clusters_match_nearest_centroid_oracle() {
    let (n, classes, dim, sep, seed) = (40, 4, 3, 1000.0, 9);
    let ds = make_classification(n, classes, dim, sep, seed).unwrap();
    let centroids = class_centroids(classes, dim, sep, seed);
    let labels = labels_of(&ds);
    for (s, &label) in labels.iter().enumerate() {
        let mut best = (f64::INFINITY, usize::MAX);
        for (c, centroid) in centroids.iter().enumerate() {
            let d2: f64 = (0..dim)
                .map(|j| (ds.inputs.at2(s, j) - centroid[j]).powi(2))
                .sum();
            if d2 < best.0 {
                best = (d2, c);
            }
        }
        assert_eq!(best.1, label, "sample {} nearest wrong centroid", s);
    }
}

#[test]
fn classification_is_seed_deterministic() {
    let a = make_classification(50, 3, 4, 5.0, 77).unwrap();
    let b = make_classification(50, 3, 4, 5.0, 77).unwrap();
    let c = make_classification(50, 3, 4, 5.0, 78).unwrap();
    assert_eq!(dataset_bytes(&a), dataset_bytes(&b));
    assert_ne!(dataset_bytes(&a), dataset_bytes(&c));
}

#[test]
fn classification_label_counts_near_multinomial_expectation() {
    let (n, classes) = (1000, 4);
    let ds = make_classification(n, classes, 2, 3.0, 123).unwrap();
    let mut counts = vec![0usize; classes];
    for &l in labels_of(&ds) {
        counts[l] += 1;
    }
    let p = 1.0 / classes as f64;
    let expect = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (c, &got) in counts.iter().enumerate() {
        assert!(
            (got as f64 - expect).abs() <= 3.0 * sigma,
            "class {} count {} outside 3 sigma of {}",
            c,
            got,
            expect
        );
    }
}

#[test]
fn classification_every_class_present_even_at_n_equals_c() {
    for seed in 0..20 {
        let ds = make_classification(5, 5, 2, 1.0, seed).unwrap();
        let present: BTreeSet<usize> = labels_of(&ds).iter().copied().collect();
        assert_eq!(present.len(), 5, "seed {} dropped a class", seed);
    }
}

#[test]
fn classification_rejects_bad_sizes() {
    assert!(make_classification(3, 4, 2, 1.0, 0).is_err());
    assert!(make_classification(10, 1, 2, 1.0, 0).is_err());
    assert!(make_classification(10, 2, 0, 1.0, 0).is_err());
}

#[test]
fn segmentation_radius_zero_gives_single_pixel_masks() {
    let ds = make_toy_segmentation(6, 8, 0, 4).unwrap();
    if let Targets::Masks(masks) = &ds.targets {
        for s in 0..6 {
            let area: f64 = (0..64).map(|i| masks.data()[s * 64 + i]).sum();
            assert_eq!(area, 1.0);
        }
    } else {
        panic!("expected masks");
    }
}

// Flood fill over bright pixels (value > 0.5) starting from any mask pixel
// must recover exactly the mask: the blob is a 4-connected disc and the
// background stays below 0.2.
#[test]
fn segmentation_mask_matches_flood_fill_oracle() {
    let (n, hw) = (8, 12);
    let ds = make_toy_segmentation(n, hw, 3, 31).unwrap();
    let masks = match &ds.targets {
        Targets::Masks(m) => m,
        _ => panic!("expected masks"),
    };
    for s in 0..n {
        let px = |y: usize, x: usize| ds.inputs.data()[((s * hw) + y) * hw + x];
        let mask_set: BTreeSet<(usize, usize)> = (0..hw)
            .flat_map(|y| (0..hw).map(move |x| (y, x)))
            .filter(|&(y, x)| masks.data()[((s * hw) + y) * hw + x] > 0.5)
            .collect();
        assert!(!mask_set.is_empty(), "sample {} has empty mask", s);

        let start = *mask_set.iter().next().unwrap();
        let mut filled = BTreeSet::new();
        let mut stack = vec![start];
        while let Some((y, x)) = stack.pop() {
            if px(y, x) <= 0.5 || !filled.insert((y, x)) {
                continue;
            }
            if y > 0 {
                stack.push((y - 1, x));
            }
            if y + 1 < hw {
                stack.push((y + 1, x));
            }
            if x > 0 {
                stack.push((y, x - 1));
            }
            if x + 1 < hw {
                stack.push((y, x + 1));
            }
        }
        assert_eq!(filled, mask_set, "sample {} flood fill disagrees", s);
    }
}

#[test]
fn segmentation_is_seed_deterministic() {
    let a = make_toy_segmentation(4, 10, 2, 5).unwrap();
    let b = make_toy_segmentation(4, 10, 2, 5).unwrap();
    assert_eq!(dataset_bytes(&a), dataset_bytes(&b));
}

#[test]
fn segmentation_rejects_small_images() {
    assert!(matches!(
        make_toy_segmentation(4, 7, 1, 0),
        Err(Error::Config(_))
    ));
}

#[test]
fn split_341_at_80_percent_gives_273_273_68() {
    let (train, val) = train_val_split(341, 0.8, 1).unwrap();
    assert_eq!(train.len(), 273);
    assert_eq!(val.len(), 68);
}

#[test]
fn split_even_half_gives_equal_sides() {
    let (train, val) = train_val_split(10, 0.5, 2).unwrap();
    assert_eq!(train.len(), 5);
    assert_eq!(val.len(), 5);
}

#[test]
fn split_rejects_degenerate_ratio() {
    assert!(train_val_split(10, 0.0, 0).is_err());
    assert!(train_val_split(10, 1.0, 0).is_err());
}

fn assert_exact_partition(shards: &[Vec<usize>], train_idx: &[usize]) {
    let mut seen = BTreeSet::new();
    for shard in shards {
        assert!(!shard.is_empty());
        for &i in shard {
            assert!(seen.insert(i), "index {} in two shards", i);
        }
    }
    let expect: BTreeSet<usize> = train_idx.iter().copied().collect();
    assert_eq!(seen, expect);
}

#[test]
fn size_skew_gamma_one_is_balanced() {
    let ds = make_classification(103, 3, 2, 3.0, 5).unwrap();
    let idx: Vec<usize> = (0..103).collect();
    let p = partition_noniid(&ds, &idx, 5, PartitionMode::SizeSkew { gamma: 1.0 }, 9).unwrap();
    let sizes = p.sizes();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    assert_exact_partition(&p.client_shards, &idx);
}

#[test]
fn size_skew_grows_with_client_index() {
    let ds = make_classification(100, 3, 2, 3.0, 5).unwrap();
    let idx: Vec<usize> = (0..100).collect();
    let p = partition_noniid(&ds, &idx, 5, PartitionMode::SizeSkew { gamma: 1.3 }, 9).unwrap();
    let sizes = p.sizes();
    assert!(sizes[4] > sizes[0], "sizes {:?} not skewed", sizes);
    assert_eq!(sizes.iter().sum::<usize>(), 100);
}

fn tv_from_global(ds: &Dataset, shard: &[usize], global: &[f64], classes: usize) -> f64 {
    let labels = labels_of(ds);
    let mut hist = vec![0.0; classes];
    for &i in shard {
        hist[labels[i]] += 1.0;
    }
    let n = shard.len() as f64;
    0.5 * (0..classes)
        .map(|c| (hist[c] / n - global[c]).abs())
        .sum::<f64>()
}

fn global_dist(ds: &Dataset, idx: &[usize], classes: usize) -> Vec<f64> {
    let labels = labels_of(ds);
    let mut hist = vec![0.0; classes];
    for &i in idx {
        hist[labels[i]] += 1.0;
    }
    hist.iter().map(|h| h / idx.len() as f64).collect()
}

#[test]
fn huge_beta_keeps_clients_near_global_distribution() {
    let classes = 4;
    let ds = make_classification(1200, classes, 2, 3.0, 17).unwrap();
    let idx: Vec<usize> = (0..1200).collect();
    let p = partition_noniid(&ds, &idx, 4, PartitionMode::Dirichlet { beta: 1000.0 }, 3).unwrap();
    let global = global_dist(&ds, &idx, classes);
    for shard in &p.client_shards {
        let tv = tv_from_global(&ds, shard, &global, classes);
        assert!(tv < 0.1, "client TV {} too far from global", tv);
    }
}

#[test]
fn label_skew_shrinks_as_beta_grows() {
    let classes = 4;
    let ds = make_classification(400, classes, 2, 3.0, 21).unwrap();
    let idx: Vec<usize> = (0..400).collect();
    let global = global_dist(&ds, &idx, classes);
    let mean_tv = |beta: f64| -> f64 {
        let mut total = 0.0;
        for seed in 0..50 {
            let p =
                partition_noniid(&ds, &idx, 4, PartitionMode::Dirichlet { beta }, seed).unwrap();
            let per_client: f64 = p
                .client_shards
                .iter()
                .map(|s| tv_from_global(&ds, s, &global, classes))
                .sum();
            total += per_client / 4.0;
        }
        total / 50.0
    };
    let low = mean_tv(0.1);
    let high = mean_tv(10.0);
    assert!(low > high, "TV at beta 0.1 ({}) <= beta 10 ({})", low, high);
}

#[test]
fn partition_rejects_infeasible_requests() {
    let ds = make_classification(10, 2, 2, 3.0, 1).unwrap();
    let idx: Vec<usize> = (0..10).collect();
    assert!(partition_noniid(&ds, &idx, 11, PartitionMode::Dirichlet { beta: 0.5 }, 0).is_err());
    assert!(partition_noniid(&ds, &idx, 0, PartitionMode::Dirichlet { beta: 0.5 }, 0).is_err());
    assert!(partition_noniid(&ds, &idx, 2, PartitionMode::Dirichlet { beta: 0.0 }, 0).is_err());
    assert!(partition_noniid(&ds, &idx, 2, PartitionMode::SizeSkew { gamma: 0.9 }, 0).is_err());
}

#[test]
fn partition_is_seed_deterministic() {
    let ds = make_classification(60, 3, 2, 3.0, 2).unwrap();
    let idx: Vec<usize> = (0..60).collect();
    let mode = PartitionMode::DirichletSizeSkew {
        beta: 0.5,
        gamma: 1.3,
    };
    let a = partition_noniid(&ds, &idx, 5, mode, 42).unwrap();
    let b = partition_noniid(&ds, &idx, 5, mode, 42).unwrap();
    assert_eq!(a, b);
}

#[test]
fn stats_csv_rows_account_for_every_sample() {
    let ds = make_classification(50, 3, 2, 3.0, 8).unwrap();
    let idx: Vec<usize> = (0..50).collect();
    let p = partition_noniid(
        &ds,
        &idx,
        4,
        PartitionMode::DirichletSizeSkew {
            beta: 0.5,
            gamma: 1.2,
        },
        6,
    )
    .unwrap();
    let csv = partition_stats_csv(&ds, &p);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "client_id,n_k,class_0,class_1,class_2");
    let mut total = 0usize;
    for line in lines {
        let cells: Vec<usize> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells.len(), 5);
        assert_eq!(cells[2] + cells[3] + cells[4], cells[1]);
        total += cells[1];
    }
    assert_eq!(total, 50);
}

#[test]
fn dataset_file_roundtrip_is_bit_exact() {
    let cls = make_classification(20, 3, 4, 2.0, 11).unwrap();
    let seg = make_toy_segmentation(5, 9, 2, 12).unwrap();
    for ds in [&cls, &seg] {
        let bytes = dataset_bytes(ds);
        let back = read_dataset(&mut bytes.as_slice()).unwrap();
        assert_eq!(*ds, back);
        assert_eq!(bytes, dataset_bytes(&back));
    }
}

#[test]
fn dataset_read_rejects_corrupt_input() {
    let ds = make_classification(5, 2, 2, 2.0, 3).unwrap();
    let mut bytes = dataset_bytes(&ds);
    let mut bad = bytes.clone();
    bad[1] = b'?';
    assert!(matches!(
        read_dataset(&mut bad.as_slice()),
        Err(Error::Format(_))
    ));
    bytes.truncate(bytes.len() - 2);
    assert!(matches!(
        read_dataset(&mut bytes.as_slice()),
        Err(Error::Format(_))
    ));
}

proptest! {
    #[test]
    fn splits_partition_the_index_set(n in 2usize..200, seed in 0u64..500, pct in 1usize..100) {
        let ratio = pct as f64 / 100.0;
        prop_assume!(ratio > 0.0 && ratio < 1.0);
        let (train, val) = train_val_split(n, ratio, seed).unwrap();
        let mut all: Vec<usize> = train.iter().chain(val.iter()).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn shards_partition_the_training_split(
        n in 12usize..80,
        k in 1usize..8,
        seed in 0u64..300,
        mode_pick in 0usize..3,
    ) {
        prop_assume!(k <= n / 2);
        let ds = make_classification(n, 3, 2, 3.0, 1).unwrap();
        let (train_idx, _) = train_val_split(n, 0.8, 7).unwrap();
        prop_assume!(k <= train_idx.len());
        let mode = match mode_pick {
            0 => PartitionMode::Dirichlet { beta: 0.5 },
            1 => PartitionMode::SizeSkew { gamma: 1.3 },
            _ => PartitionMode::DirichletSizeSkew { beta: 0.5, gamma: 1.3 },
        };
        let p = partition_noniid(&ds, &train_idx, k, mode, seed).unwrap();
        prop_assert_eq!(p.k(), k);
        let mut seen = BTreeSet::new();
        for shard in &p.client_shards {
            prop_assert!(!shard.is_empty());
            for &i in shard {
                prop_assert!(seen.insert(i));
            }
        }
        let expect: BTreeSet<usize> = train_idx.iter().copied().collect();
        prop_assert_eq!(seen, expect);
    }
}
