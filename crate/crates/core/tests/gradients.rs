mod common;

use common::{param_gradcheck, random, rng, weighted_sum};
use gridseg::attention::{AttentionConfig, ChannelAttention, GaborAttention, PositionalAttention, TriAttention};
use gridseg::gabor::{make_gabor_bank, GaborConvLayer};
use gridseg::gradcheck::check_gradient;
use gridseg::loss::{total_loss, LossConfig};
use gridseg::model::ArcsinhLayer;
use gridseg::params::{ParamId, ParamStore};
use gridseg::Tensor;

const TOL: f64 = 1e-3;

fn nonzero_gammas(store: &mut ParamStore, ids: &[ParamId]) {
    for (i, &id) in ids.iter().enumerate() {
        store.value_mut(id).data_mut()[0] = 0.5 + 0.25 * i as f64;
    }
}

#[test]
fn gabor_conv_input_and_weights() {
    let bank = make_gabor_bank(4, 3, 2.0, 1.0, 0.3).unwrap();
    let mut store = ParamStore::new();
    let layer = GaborConvLayer::new(&mut store, "l", 2, 2, bank, 1, 1, false, &mut rng(0)).unwrap();
    let x = random(&[1, 2, 8, 8], 1);
    let err = check_gradient(std::slice::from_ref(&x), |tape, v| weighted_sum(tape, &layer.forward(tape, &store, &v[0])?, 7));
    assert!(err <= TOL, "input {err}");
    let base = layer.base_weights();
    let err = param_gradcheck(&mut store, &[base], |tape, store| {
        let y = layer.forward(tape, store, &tape.constant(x.clone()))?;
        weighted_sum(tape, &y, 7)
    });
    assert!(err <= TOL, "weights {err}");
}

#[test]
fn learnable_bank_sigma_and_wavelength() {
    let bank = make_gabor_bank(3, 5, 3.0, 1.4, 0.0).unwrap();
    let mut store = ParamStore::new();
    let layer = GaborConvLayer::new(&mut store, "l", 1, 2, bank, 1, 2, true, &mut rng(5)).unwrap();
    let x = random(&[1, 1, 6, 6], 2);
    let ids = [store.find("l.sigma").unwrap(), store.find("l.wavelength").unwrap()];
    let err = param_gradcheck(&mut store, &ids, |tape, store| {
        weighted_sum(tape, &layer.forward(tape, store, &tape.constant(x.clone()))?, 3)
    });
    assert!(err <= TOL, "{err}");
}

#[test]
fn positional_branch() {
    let mut store = ParamStore::new();
    let att = PositionalAttention::new(&mut store, "p", 2, false, &mut rng(1));
    nonzero_gammas(&mut store, &[att.gamma()]);
    let x = random(&[1, 2, 4, 4], 3);
    let err = check_gradient(std::slice::from_ref(&x), |tape, v| weighted_sum(tape, &att.forward(tape, &store, &v[0])?, 1));
    assert!(err <= TOL, "input {err}");
    let (q, k, v) = att.projections();
    let err = param_gradcheck(&mut store, &[q, k, v, att.gamma()], |tape, store| {
        weighted_sum(tape, &att.forward(tape, store, &tape.constant(x.clone()))?, 1)
    });
    assert!(err <= TOL, "params {err}");
}

#[test]
fn channel_branch() {
    let mut store = ParamStore::new();
    let att = ChannelAttention::new(&mut store, "c", 2, false);
    nonzero_gammas(&mut store, &[att.gamma()]);
    let x = random(&[1, 2, 4, 4], 4);
    let err = check_gradient(std::slice::from_ref(&x), |tape, v| weighted_sum(tape, &att.forward(tape, &store, &v[0])?, 2));
    assert!(err <= TOL, "input {err}");
    let err = param_gradcheck(&mut store, &[att.gamma()], |tape, store| {
        weighted_sum(tape, &att.forward(tape, store, &tape.constant(x.clone()))?, 2)
    });
    assert!(err <= TOL, "gamma {err}");
}

#[test]
fn gabor_branch() {
    let mut store = ParamStore::new();
    let att = GaborAttention::new(&mut store, "g", 2, &AttentionConfig::default(), &mut rng(2)).unwrap();
    nonzero_gammas(&mut store, &[att.gamma()]);
    let x = random(&[1, 2, 4, 4], 5);
    let err = check_gradient(std::slice::from_ref(&x), |tape, v| weighted_sum(tape, &att.forward(tape, &store, &v[0])?, 3));
    assert!(err <= TOL, "input {err}");
    let (lq, lk, lv) = att.layers();
    let ids = [lq.base_weights(), lk.base_weights(), lv.base_weights(), att.project(), att.gamma()];
    let err = param_gradcheck(&mut store, &ids, |tape, store| {
        weighted_sum(tape, &att.forward(tape, store, &tape.constant(x.clone()))?, 3)
    });
    assert!(err <= TOL, "params {err}");
}

#[test]
fn tri_attention() {
    let mut store = ParamStore::new();
    let tri = TriAttention::new(&mut store, "t", 2, &AttentionConfig::default(), &mut rng(3)).unwrap();
    nonzero_gammas(&mut store, &tri.gammas());
    let x = random(&[1, 2, 4, 4], 6);
    let err = check_gradient(&[x], |tape, v| weighted_sum(tape, &tri.forward(tape, &store, &v[0])?, 4));
    assert!(err <= TOL, "{err}");
}

#[test]
fn arcsinh_layer() {
    let mut store = ParamStore::new();
    let layer = ArcsinhLayer::new(&mut store, "s");
    store.value_mut(layer.a).data_mut()[0] = 1.7;
    store.value_mut(layer.b).data_mut()[0] = -0.3;
    let x = random(&[1, 1, 4, 4], 7).scale(5.0);
    let err = check_gradient(std::slice::from_ref(&x), |tape, v| weighted_sum(tape, &layer.forward(tape, &store, &v[0])?, 5));
    assert!(err <= TOL, "input {err}");
    let err = param_gradcheck(&mut store, &[layer.a, layer.b], |tape, store| {
        weighted_sum(tape, &layer.forward(tape, store, &tape.constant(x.clone()))?, 5)
    });
    assert!(err <= TOL, "params {err}");
}

#[test]
fn total_loss_over_six_heads() {
    // Consensus values kept away from band edges so the loss is smooth in the logits.
    let levels = [0.0, 0.1, 0.3, 0.4, 0.6, 0.7, 0.8, 1.0];
    let y = Tensor::from_fn(&[1, 1, 4, 4], |i| levels[(i * 5) % levels.len()]);
    let heads: Vec<Tensor> = (0..6).map(|k| random(&[1, 1, 4, 4], 20 + k).scale(3.0)).collect();
    for cfg in [LossConfig::default(), LossConfig::rounded_focal(), LossConfig { soft_targets: true, ..LossConfig::default() }] {
        let err = check_gradient(&heads, |_, v| Ok(total_loss(v, &y, &cfg)?.loss));
        assert!(err <= TOL, "{cfg:?}: {err}");
    }
}
