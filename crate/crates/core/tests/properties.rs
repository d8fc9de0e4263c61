use priorseg::fewshot::{make_folds, sample_episode, Phase};
use priorseg::image::{synth_dataset, RgbImage};
use priorseg::nn::FeatureMap;
use priorseg::patch::{felz_segment, EdgeWeight, FelzParams};
use priorseg::regionmap::{guided_region_map, prior_region_map};
use priorseg::image::BinaryMask;
use proptest::prelude::*;

fn palette_image(w: usize, h: usize, palette: &[[u8; 3]], picks: &[usize]) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| palette[picks[(y * w + x) % picks.len()] % palette.len()])
}

fn params4(scale: f32) -> FelzParams {
    FelzParams { scale, min_component_size: 1, edge_connectivity: 4, weight: EdgeWeight::Rgb }
}

/// Plain relabelling version of the greedy merge: every pixel carries its
/// component id, merges rewrite ids, no union-find.
fn reference_felz(img: &RgbImage, k: f32) -> Vec<usize> {
    let (w, h) = (img.width(), img.height());
    let dist = |a: usize, b: usize| {
        let (p, q) = (img.pixel(a % w, a / w), img.pixel(b % w, b / w));
        (0..3).map(|c| (p[c] as f32 - q[c] as f32).powi(2)).sum::<f32>().sqrt()
    };
    let mut edges = Vec::new();
    for i in 0..w * h {
        if i % w + 1 < w {
            edges.push((dist(i, i + 1), i, i + 1));
        }
        if i / w + 1 < h {
            edges.push((dist(i, i + w), i, i + w));
        }
    }
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut id: Vec<usize> = (0..w * h).collect();
    let mut internal = vec![0f32; w * h];
    for (d, a, b) in edges {
        let (ca, cb) = (id[a], id[b]);
        if ca == cb {
            continue;
        }
        let size = |c: usize| id.iter().filter(|&&v| v == c).count() as f32;
        let (ta, tb) = (internal[ca] + k / size(ca), internal[cb] + k / size(cb));
        if d <= ta.min(tb) {
            id.iter_mut().filter(|v| **v == cb).for_each(|v| *v = ca);
            internal[ca] = d.max(internal[ca]).max(internal[cb]);
        }
    }
    id
}

fn flood_count(w: usize, h: usize, ids: &[i64]) -> usize {
    let mut seen = vec![false; w * h];
    let mut count = 0;
    for start in 0..w * h {
        if seen[start] {
            continue;
        }
        count += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut next = vec![];
            if x > 0 { next.push(i - 1); }
            if x + 1 < w { next.push(i + 1); }
            if y > 0 { next.push(i - w); }
            if y + 1 < h { next.push(i + w); }
            for j in next {
                if !seen[j] && ids[j] == ids[i] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    count
}

fn cells(h: usize, w: usize, c: usize, values: &[f32]) -> FeatureMap<f32> {
    FeatureMap::new(h, w, c, values.iter().cycle().take(h * w * c).copied().collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn felz_matches_reference_merging(
        w in 2usize..10,
        h in 2usize..10,
        pixels in prop::collection::vec(prop::array::uniform3(any::<u8>()), 100),
        k in 1.0f32..2000.0,
    ) {
        let img = RgbImage::from_fn(w, h, |x, y| pixels[y * w + x]);
        let seg = felz_segment(&img, &params4(k)).unwrap();
        let reference = reference_felz(&img, k);
        let n = w * h;
        for a in 0..n {
            for b in 0..n {
                let same = seg.labels()[a] == seg.labels()[b];
                prop_assert_eq!(same, reference[a] == reference[b], "pixels {} and {}", a, b);
            }
        }
    }

    #[test]
    fn felz_scale_extremes(
        w in 2usize..10,
        h in 2usize..10,
        palette in prop::collection::vec(prop::array::uniform3(any::<u8>()), 2..5),
        picks in prop::collection::vec(0usize..5, 1..40),
    ) {
        let img = palette_image(w, h, &palette, &picks);
        // Below every nonzero edge weight only identical colours merge.
        let flat = felz_segment(&img, &params4(1e-3)).unwrap().patch_count();
        let colour_ids: Vec<i64> = (0..w * h)
            .map(|i| {
                let p = img.pixel(i % w, i / w);
                ((p[0] as i64) << 16) | ((p[1] as i64) << 8) | p[2] as i64
            })
            .collect();
        prop_assert_eq!(flat, flood_count(w, h, &colour_ids));
        // k / n above the largest edge weight merges everything.
        let huge = 450.0 * (w * h) as f32;
        prop_assert_eq!(felz_segment(&img, &params4(huge)).unwrap().patch_count(), 1);
    }

    #[test]
    fn region_maps_ignore_feature_scale(
        h in 1usize..6,
        w in 1usize..6,
        c in 1usize..6,
        xq in prop::collection::vec(-1.0f32..2.0, 1..60),
        pq in prop::collection::vec(-1.0f32..2.0, 1..60),
        scale in prop::sample::select(vec![0.5f32, 2.0, 4.0, 8.0]),
    ) {
        let a = cells(h, w, c, &xq);
        let b = cells(h, w, c, &pq);
        let scaled = FeatureMap::new(h, w, c, b.data().iter().map(|v| v * scale).collect()).unwrap();
        let m1 = prior_region_map(&a, &b).unwrap();
        let m2 = prior_region_map(&a, &scaled).unwrap();
        prop_assert_eq!(m1.values(), m2.values());
        prop_assert!(m1.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn guided_map_ignores_support_cell_order(
        n in 2usize..10,
        c in 1usize..5,
        xq in prop::collection::vec(0.0f32..2.0, 1..40),
        xs in prop::collection::vec(0.0f32..2.0, 1..40),
        mask in prop::collection::vec(any::<bool>(), 10),
        rotate in 0usize..10,
    ) {
        let q = cells(2, 2, c, &xq);
        let s = cells(1, n, c, &xs);
        let mut bits: Vec<bool> = mask[..n].to_vec();
        bits[0] = true;
        let m = BinaryMask::from_fn(n, 1, |x, _| bits[x]);
        // Rotate support cells together with their mask bits.
        let r = rotate % n;
        let rs_cells: Vec<Vec<f32>> = (0..n).map(|i| s.cell((i + r) % n).to_vec()).collect();
        let rs = FeatureMap::from_cells(1, n, &rs_cells).unwrap();
        let rm = BinaryMask::from_fn(n, 1, |x, _| bits[(x + r) % n]);
        let a = guided_region_map(&q, &s, &m).unwrap();
        let b = guided_region_map(&q, &rs, &rm).unwrap();
        prop_assert_eq!(a.values(), b.values());
    }
}

#[test]
fn sampled_queries_never_join_their_support() {
    let data = synth_dataset(400, 8, 16, 3).unwrap();
    let folds = make_folds(8, 4).unwrap();
    for seed in 0..10_000u64 {
        let split = &folds[(seed % 4) as usize];
        let phase = if seed % 2 == 0 { Phase::Train } else { Phase::Test };
        let ep = sample_episode(&data, split, phase, 1 + (seed % 3) as usize, seed).unwrap();
        assert!(!ep.support_indices.contains(&ep.query_index));
        assert!(split.classes(phase).contains(&ep.class));
        let mut ids = ep.support_indices.clone();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), ep.shots());
    }
}
