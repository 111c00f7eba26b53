mod support;

use elastic_vit::extract::Image;
use elastic_vit::geometry::{
    add_redundant_patches, block_drop, block_rescale, coverage_fraction, grid_blocks,
    make_density_grid, make_grid, rasterize_coverage,
};
use elastic_vit::sampling::{central_sampling, edge_sampling, CentralParams, EdgeParams};
use elastic_vit::{ImageSpec, Patch, PatchSet, Rng};
use proptest::prelude::*;
use support::{check_partition, naive_counts};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 24,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn grids_partition(r in 2usize..12, cols in 1usize..9, rows in 1usize..9) {
        let spec = ImageSpec::new(cols * r, rows * r, 1).unwrap();
        let set = make_grid(spec, r).unwrap();
        prop_assert_eq!(set.len(), cols * rows);
        prop_assert!(set.patches.iter().all(|p| p.s == 1.0));
        check_partition(&set).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn density_grids_partition(r in 2usize..9, n in 1usize..10, k in 1usize..4) {
        let side = n * r * k;
        let spec = ImageSpec::square(side, 1).unwrap();
        let set = make_density_grid(spec, r, n).unwrap();
        prop_assert_eq!(set.len(), n * n);
        for p in &set.patches {
            prop_assert_eq!(p.s * r as f64 * n as f64, side as f64);
        }
        check_partition(&set).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn central_partitions(r in prop::sample::select(vec![4usize, 8, 16]), cells in 1usize..4, splits in 0usize..20) {
        let spec = ImageSpec::square(4 * r * cells, 1).unwrap();
        let initial = cells * cells;
        let max = (spec.width * 2 / r).pow(2);
        let target = (initial + 3 * splits).min(initial + 3 * ((max - initial) / 3));
        let set = central_sampling(spec, r, target, &CentralParams::default()).unwrap();
        prop_assert_eq!(set.len(), target);
        check_partition(&set).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn edge_partitions(seed in any::<u64>(), splits in 0usize..15) {
        let mut rng = Rng::seed_from_u64(seed);
        let spec = ImageSpec::square(64, 1).unwrap();
        let pixels = (0..64 * 64).map(|_| rng.uniform()).collect();
        let img = Image::new(spec, pixels).unwrap();
        let set = edge_sampling(&img, 8, 4 + 3 * splits, &EdgeParams::default()).unwrap();
        prop_assert_eq!(set.len(), 4 + 3 * splits);
        prop_assert!(set.patches.iter().all(|p| p.side(8) >= 4.0));
        check_partition(&set).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn library_rasterizer_matches_definition(
        raw in prop::collection::vec((-10.0f64..40.0, -10.0f64..40.0, 0.1f64..3.0), 0..12)
    ) {
        let spec = ImageSpec::new(37, 29, 1).unwrap();
        let patches = raw.into_iter().map(|(x, y, s)| Patch::new(x, y, s)).collect();
        let set = PatchSet::new(spec, 8, patches).unwrap();
        prop_assert_eq!(rasterize_coverage(&set).counts, naive_counts(&set));
    }

    #[test]
    fn redundant_patches_stay_inside(seed in any::<u64>(), k in 0usize..40) {
        let grid = make_grid(ImageSpec::square(64, 1).unwrap(), 8).unwrap();
        let out = add_redundant_patches(&grid, k, 0.5, 2.0, &mut Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&out.patches[..64], &grid.patches[..]);
        for p in &out.patches[64..] {
            prop_assert!(p.x >= 0.0 && p.y >= 0.0);
            prop_assert!(p.x + p.side(8) <= 64.0 && p.y + p.side(8) <= 64.0);
            prop_assert!((0.5..=2.0).contains(&p.s));
        }
        prop_assert_eq!(coverage_fraction(&out), 1.0);
    }
}

#[test]
fn standard_vit_grid_is_fourteen_by_fourteen() {
    let set = make_grid(ImageSpec::square(224, 3).unwrap(), 16).unwrap();
    assert_eq!(set.len(), 196);
    assert_eq!(set.patches[14], Patch::new(0.0, 16.0, 1.0));
    assert_eq!(set.patches[195], Patch::new(208.0, 208.0, 1.0));
}

#[test]
fn density_examples() {
    let spec = ImageSpec::square(224, 1).unwrap();
    assert_eq!(make_density_grid(spec, 16, 14).unwrap(), make_grid(spec, 16).unwrap());
    let coarse = make_density_grid(spec, 16, 7).unwrap();
    assert_eq!(coarse.len(), 49);
    assert!(coarse.patches.iter().all(|p| p.s == 2.0));
    let fine = make_density_grid(spec, 16, 28).unwrap();
    assert_eq!(fine.len(), 784);
    assert!(fine.patches.iter().all(|p| p.s == 0.5));
}

#[test]
fn block_transforms_remove_exactly_three_tokens() {
    let spec = ImageSpec::square(224, 1).unwrap();
    let grid = make_grid(spec, 16).unwrap();
    let blocks = grid_blocks(&spec, 16);
    assert_eq!(blocks.len(), 49);
    for (i, &b) in blocks.iter().enumerate() {
        let rescaled = block_rescale(&grid, b).unwrap();
        assert_eq!(rescaled.len(), 193);
        assert_eq!(coverage_fraction(&rescaled), 1.0);
        let dropped = block_drop(&grid, b, &mut Rng::seed_from_u64(i as u64)).unwrap();
        assert_eq!(dropped.len(), 193);
        let covered = naive_counts(&dropped).iter().filter(|&&c| c > 0).count();
        assert_eq!(covered, 224 * 224 - 3 * 16 * 16);
        let survivor: Vec<_> = dropped
            .patches
            .iter()
            .filter(|p| !rescaled.patches.contains(p))
            .collect();
        assert_eq!(survivor.len(), 1);
        assert!(grid.patches.contains(survivor[0]));
    }
}

#[test]
fn all_blocks_rescaled_is_the_half_density_grid() {
    let spec = ImageSpec::square(224, 1).unwrap();
    let mut set = make_grid(spec, 16).unwrap();
    let mut dropped = set.clone();
    let mut rng = Rng::seed_from_u64(3);
    for b in grid_blocks(&spec, 16) {
        set = block_rescale(&set, b).unwrap();
        dropped = block_drop(&dropped, b, &mut rng).unwrap();
    }
    let mut sorted = set.patches.clone();
    sorted.sort_by(|a, b| (a.y, a.x).partial_cmp(&(b.y, b.x)).unwrap());
    assert_eq!(sorted, make_density_grid(spec, 16, 7).unwrap().patches);
    assert_eq!(dropped.len(), 49);
    assert_eq!(coverage_fraction(&dropped), 0.25);
}

#[test]
fn block_errors() {
    let spec = ImageSpec::square(64, 1).unwrap();
    let grid = make_grid(spec, 8).unwrap();
    let b = grid_blocks(&spec, 8)[0];
    let once = block_rescale(&grid, b).unwrap();
    assert!(block_rescale(&once, b).is_err());
    assert!(block_drop(&once, b, &mut Rng::seed_from_u64(0)).is_err());
    let outside = elastic_vit::geometry::BlockIndex { bx: 4, by: 0 };
    assert!(block_rescale(&grid, outside).is_err());
}

#[test]
fn same_seed_same_output() {
    let grid = make_grid(ImageSpec::square(64, 1).unwrap(), 8).unwrap();
    let run = |seed| {
        let b = grid_blocks(&grid.image, 8)[5];
        let d = block_drop(&grid, b, &mut Rng::seed_from_u64(seed)).unwrap();
        add_redundant_patches(&d, 7, 0.5, 2.0, &mut Rng::seed_from_u64(seed))
            .unwrap()
            .to_json()
            .unwrap()
    };
    assert_eq!(run(11), run(11));
}
