use gridsr_tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn batch_for(c: &ModelConfig, b: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lh, lw) = c.lr_shape;
    let (h, w) = c.hr_shape;
    let cov = c.tiling.cov_size;
    Batch {
        lr: random(&[b, 1, lh, lw], &mut rng),
        base: random(&[b, 1, h, w], &mut rng),
        stats: random(&[b, 2], &mut rng),
        lr_covariates: Some(random(&[b, 2, lh, lw], &mut rng)),
        hr_covariates: Some(random(&[b, 2, cov, cov], &mut rng)),
        lr_crop: None,
        cov_offset: None,
    }
}

#[test]
fn tile_model_shapes_and_encoder_stages() {
    let c = ModelConfig::desk(Architecture::SwinTile, (20, 20), (80, 80));
    let m = Model::build(c.clone(), 0).unwrap();
    let batch = batch_for(&m.config, 2, 1);
    let y = m.predict(&batch).unwrap();
    assert_eq!(y.shape(), &[2, 1, 40, 40]);
    let Network::SwinTile(net) = &m.net else { unreachable!() };
    let mut g = Graph::inference(&m.store);
    let e = net.encode(&mut g, &batch).unwrap();
    let dims: Vec<usize> = e.iter().map(|v| g.shape(*v)[2]).collect();
    assert_eq!(dims, vec![40, 20, 10]);
    assert!(e.iter().all(|v| g.shape(*v)[1] == 2));
    let p = net.process(&mut g, &batch).unwrap();
    assert_eq!(g.shape(p), &[2, 3, 10, 10]);
}

#[test]
fn processor_default_crop_starts_at_one() {
    let mut c = ModelConfig::desk(Architecture::SwinTile, (20, 20), (80, 80));
    c.validate().unwrap();
    c.param_count = 0;
    let m = Model::build(c, 3).unwrap();
    let Network::SwinTile(net) = &m.net else { unreachable!() };
    let mut batch = batch_for(&m.config, 1, 2);
    let mut g = Graph::inference(&m.store);
    let default = net.process(&mut g, &batch).unwrap();
    let default = g.value(default).clone();
    batch.lr_crop = Some(vec![(1, 1)]);
    let explicit = net.process(&mut g, &batch).unwrap();
    assert_eq!(g.value(explicit).data(), default.data());
}

#[test]
fn full_domain_shapes() {
    for arch in [Architecture::SwinFull, Architecture::Unet, Architecture::Deepesd, Architecture::Bicubic] {
        let m = Model::build(ModelConfig::desk(arch, (20, 20), (80, 80)), 0).unwrap();
        let y = m.predict(&batch_for(&m.config, 3, 0)).unwrap();
        assert_eq!(y.shape(), &[3, 1, 80, 80], "{arch}");
    }
}

#[test]
fn zeroed_final_layer_gives_zero_residual() {
    for arch in Architecture::ALL {
        let mut m = Model::build(ModelConfig::desk(arch, (20, 20), (80, 80)), 5).unwrap();
        m.zero_final_layer();
        let y = m.predict(&batch_for(&m.config, 2, 9)).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0), "{arch}");
    }
}

#[test]
fn deepesd_dense_columns_are_independent() {
    let mut m = Model::build(ModelConfig::desk(Architecture::Deepesd, (20, 20), (80, 80)), 1).unwrap();
    let batch = batch_for(&m.config, 1, 4);
    let before = m.predict(&batch).unwrap();
    let Network::Deepesd(net) = &m.net else { unreachable!() };
    let (w, b) = (net.dense.weight, net.dense.bias);
    let target = 1234;
    let out = m.store.get(w).shape()[1];
    let rows = m.store.get(w).shape()[0];
    for r in 0..rows {
        m.store.get_mut(w).data_mut()[r * out + target] += 0.5;
    }
    m.store.get_mut(b).data_mut()[target] += 0.5;
    let after = m.predict(&batch).unwrap();
    let changed: Vec<usize> =
        (0..before.len()).filter(|&i| before.data()[i] != after.data()[i]).collect();
    assert_eq!(changed, vec![target]);
}

#[test]
fn parameter_count_is_dominated_by_dense_map() {
    let m = Model::build(ModelConfig::desk(Architecture::Deepesd, (20, 20), (80, 80)), 0).unwrap();
    let Network::Deepesd(net) = &m.net else { unreachable!() };
    assert_eq!(m.store.get(net.dense.weight).shape(), &[400, 6400]);
    assert!(m.param_count() > 400 * 6400);
    assert_eq!(m.config.param_count, m.param_count());
}

#[test]
fn checkpoint_reload_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    for arch in [Architecture::SwinTile, Architecture::Unet] {
        let m = Model::build(ModelConfig::desk(arch, (20, 20), (80, 80)), 11).unwrap();
        let batch = batch_for(&m.config, 2, 3);
        let y0 = m.predict(&batch).unwrap();
        let mut ck = Checkpoint::from_model(&m, TilingMode::Full, 11, "abc");
        ck.history.push(EpochRecord { epoch: 0, train_loss: 1.0, val_loss: 2.0 });
        let path = dir.path().join(format!("{arch}.ckpt"));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.param_hash(), ck.param_hash());
        assert_eq!(back.history, ck.history);
        let y1 = back.model().unwrap().predict(&batch).unwrap();
        assert!(y0.max_abs_diff(&y1) <= 1e-6);
    }
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(Error::Checkpoint(_))));
    let m = Model::build(ModelConfig::desk(Architecture::Deepesd, (4, 4), (16, 16)), 0).unwrap();
    let bytes = Checkpoint::from_model(&m, TilingMode::Full, 0, "").to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
}

#[test]
fn wrong_input_shape_is_an_error() {
    let m = Model::build(ModelConfig::desk(Architecture::SwinFull, (20, 20), (80, 80)), 0).unwrap();
    let mut batch = batch_for(&m.config, 1, 0);
    batch.lr = Tensor::zeros(&[1, 1, 19, 20]);
    assert!(matches!(m.predict(&batch), Err(Error::Shape(_))));
}
