mod common;

use common::{random, rng};
use gridseg::attention::{AttentionConfig, TriAttention};
use gridseg::autograd::Tape;
use gridseg::gridded::{attention_cost, tile, untile, GriddedAttention, ScaleSet};
use gridseg::harness::bench::measure_peak_affinity;
use gridseg::params::ParamStore;
use gridseg::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn nonzero_gammas(store: &mut ParamStore, att: &GriddedAttention, seed: u64) {
    let mut r = rng(seed + 1);
    for b in att.branches() {
        for g in b.gammas() {
            store.value_mut(g).data_mut()[0] = r.gen_range(0.2..1.0);
        }
    }
}

/// Single scale with one tile covering the map is the plain tri-attention module.
#[test]
fn single_scale_single_tile_equals_tri_attention() {
    let cfg = AttentionConfig::default();
    let scales = ScaleSet::halving(1).unwrap();
    for seed in 0..20 {
        let side = [4, 6, 8][seed as usize % 3];
        let c = 2 + seed as usize % 5;
        let mut store = ParamStore::new();
        let grid = GriddedAttention::new(&mut store, "a", c, &scales, Some(side), &cfg, &mut rng(seed)).unwrap();
        nonzero_gammas(&mut store, &grid, seed);
        let mut plain_store = ParamStore::new();
        let plain = TriAttention::new(&mut plain_store, "b", c, &cfg, &mut rng(seed)).unwrap();
        assert_eq!(plain_store.len(), store.len());
        for (dst, src) in plain_store.ids().collect::<Vec<_>>().into_iter().zip(store.ids()) {
            let v = store.value(src).clone();
            plain_store.set(dst, v).unwrap();
        }
        let x = random(&[2, c, side, side], seed);
        let tape = Tape::inference();
        let got = grid.forward(&tape, &store, &[tape.constant(x.clone())]).unwrap();
        let want = plain.forward(&tape, &plain_store, &tape.constant(x)).unwrap();
        let d = got[0].value().max_abs_diff(want.value());
        assert!(d <= 1e-5, "seed {seed}: {d}");
    }
}

/// Each tile is attended on its own: compare against cropping tiles by hand.
#[test]
fn tiles_are_attended_independently() {
    let cfg = AttentionConfig::default();
    let scales = ScaleSet::halving(1).unwrap();
    let (c, side, t) = (3, 8, 4);
    let mut store = ParamStore::new();
    let grid = GriddedAttention::new(&mut store, "a", c, &scales, Some(t), &cfg, &mut rng(4)).unwrap();
    nonzero_gammas(&mut store, &grid, 4);
    let x = random(&[1, c, side, side], 11);
    let tape = Tape::inference();
    let got = grid.forward(&tape, &store, &[tape.constant(x.clone())]).unwrap()[0].value().clone();
    let module = &grid.branches()[0];
    for (oy, ox) in [(0, 0), (0, 4), (4, 0), (4, 4)] {
        let crop = Tensor::from_fn(&[1, c, t, t], |i| {
            let (ch, y, xx) = (i / (t * t), i / t % t, i % t);
            x.at(&[0, ch, oy + y, ox + xx])
        });
        let want = module.forward(&tape, &store, &tape.constant(crop)).unwrap();
        for ch in 0..c {
            for y in 0..t {
                for xx in 0..t {
                    let a = got.at(&[0, ch, oy + y, ox + xx]);
                    let b = want.value().at(&[0, ch, y, xx]);
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn batched_tiles_match_sequential_tiles() {
    let cfg = AttentionConfig::default();
    let scales = ScaleSet::halving(2).unwrap();
    let mut store = ParamStore::new();
    let seq = GriddedAttention::new(&mut store, "a", 2, &scales, Some(4), &cfg, &mut rng(7)).unwrap();
    nonzero_gammas(&mut store, &seq, 7);
    let wide = seq.clone().with_batch_width(3);
    let tape = Tape::inference();
    let maps = [tape.constant(random(&[2, 2, 12, 12], 1)), tape.constant(random(&[2, 2, 6, 6], 2))];
    let a = seq.forward(&tape, &store, &maps).unwrap();
    let b = wide.forward(&tape, &store, &maps).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert!(p.value().max_abs_diff(q.value()) <= 1e-12);
    }
}

#[test]
fn upscale_blocks_are_shared_between_branches() {
    let cfg = AttentionConfig::dual();
    let scales = ScaleSet::halving(3).unwrap();
    let mut store = ParamStore::new();
    let grid = GriddedAttention::new(&mut store, "a", 2, &scales, Some(4), &cfg, &mut rng(2)).unwrap();
    assert_eq!(grid.upscale_blocks().len(), 2);
    let maps_data = [random(&[1, 2, 8, 8], 1), random(&[1, 2, 4, 4], 2), random(&[1, 2, 2, 2], 3)];
    let run = |store: &ParamStore| {
        let tape = Tape::inference();
        let maps: Vec<_> = maps_data.iter().map(|m| tape.constant(m.clone())).collect();
        grid.forward(&tape, store, &maps)
            .unwrap()
            .iter()
            .map(|v| v.value().clone())
            .collect::<Vec<_>>()
    };
    let before = run(&store);
    assert!(before.iter().all(|m| m.shape() == [1, 2, 8, 8]));
    // Perturb the ½→1 block only.
    let w = grid.upscale_blocks()[0].weight();
    store.value_mut(w).data_mut().iter_mut().for_each(|v| *v += 0.1);
    let after = run(&store);
    assert_eq!(after[0], before[0]);
    assert!(after[1].max_abs_diff(&before[1]) > 1e-6);
    assert!(after[2].max_abs_diff(&before[2]) > 1e-6);
    // The ¼→½ block only reaches the coarsest branch.
    let w = grid.upscale_blocks()[1].weight();
    store.value_mut(w).data_mut().iter_mut().for_each(|v| *v -= 0.1);
    let again = run(&store);
    assert_eq!(again[1], after[1]);
    assert!(again[2].max_abs_diff(&after[2]) > 1e-6);
}

#[test]
fn identity_upscaling_is_nearest_upsampling() {
    let cfg = AttentionConfig::dual();
    let scales = ScaleSet::halving(2).unwrap();
    let mut store = ParamStore::new();
    let grid = GriddedAttention::new(&mut store, "a", 1, &scales, Some(4), &cfg, &mut rng(0)).unwrap();
    grid.upscale_blocks()[0].set_identity(&mut store);
    let coarse = random(&[1, 1, 4, 4], 5);
    let tape = Tape::inference();
    let up = grid.realign(&tape, &store, 1, &tape.constant(coarse.clone())).unwrap();
    let want = Tensor::from_fn(&[1, 1, 8, 8], |i| coarse.at(&[0, 0, i / 8 / 2, i % 8 / 2]));
    assert!(up.value().max_abs_diff(&want) <= 1e-12);
}

#[test]
fn tile_count_formula() {
    let t = 16;
    for g in [2usize, 4, 8] {
        let scales = ScaleSet::halving(3).unwrap();
        let want: usize = (0..3).map(|i| (g >> i).max(1).pow(2)).sum();
        let cost = attention_cost(g * t, &scales, t).unwrap();
        assert_eq!(cost.tile_count, want, "g = {g}");
        assert_eq!(cost.gridded_entries, (want * t.pow(4)) as u128);
        assert_eq!(cost.ratio, want as f64 / g.pow(4) as f64);
    }
    let c = attention_cost(64, &ScaleSet::halving(3).unwrap(), 16).unwrap();
    assert_eq!((c.tile_count, c.ratio), (21, 21.0 / 256.0));
}

/// Sequential tiles bound the live affinity by one tile's worth per branch.
#[test]
fn measured_peak_respects_tile_bound() {
    let configs: [(usize, usize, usize); 10] = [
        (16, 1, 4),
        (16, 2, 4),
        (16, 3, 4),
        (32, 3, 8),
        (32, 2, 16),
        (24, 2, 4),
        (20, 1, 8),
        (32, 3, 4),
        (16, 3, 16),
        (12, 2, 6),
    ];
    for (side, n, t) in configs {
        let scales = ScaleSet::halving(n).unwrap();
        let peak = measure_peak_affinity(side, &scales, Some(t), 2).unwrap();
        assert!(peak <= t.pow(4), "side {side} scales {n} T {t}: {peak}");
        let cost = attention_cost(side, &scales, t).unwrap();
        assert!(peak as u128 <= cost.gridded_entries);
    }
    let full = measure_peak_affinity(16, &ScaleSet::halving(1).unwrap(), None, 2).unwrap();
    assert_eq!(full, 16usize.pow(4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn untile_inverts_tile(b in 1usize..3, c in 1usize..4, h in 1usize..20, w in 1usize..20, t in 1usize..9, seed in 0u64..100) {
        let m = random(&[b, c, h, w], seed);
        let grid = tile(&m, t).unwrap();
        prop_assert_eq!(grid.tiles.len(), h.div_ceil(t) * w.div_ceil(t));
        prop_assert_eq!(untile(&grid).unwrap(), m);
    }
}
