use leanvae::lvid::RawVideo;
use leanvae::model::{Model, ModelConfig};
use leanvae::selftest::{random_frame_chunking, random_row_chunking};
use leanvae::tiling::{split_rows, stream_decode, stream_encode, StreamState};
use leanvae::training::{TrainConfig, Trainer};
use leanvae::{Error, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig { d1: 8, d2: 8, width: 16, d: 4, ff_expansion: 1, seed: 9, ..ModelConfig::default() }
}

fn concat(parts: &[Tensor<f64>]) -> Tensor<f64> {
    Tensor::concat_axis0(&parts.iter().collect::<Vec<_>>()).unwrap()
}

#[test]
fn trained_checkpoint_reloads_in_double_precision() {
    let mut cfg = TrainConfig { model: tiny(), ..TrainConfig::default() };
    cfg.train.frames = 5;
    cfg.train.height = 16;
    cfg.train.width = 16;
    cfg.train.batch = 2;
    let mut trainer = Trainer::<f32>::new(cfg).unwrap();
    for _ in 0..5 {
        trainer.train_step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.lvck");
    trainer.model.save(&path).unwrap();

    let m32 = Model::<f32>::load(&path).unwrap();
    assert_eq!(m32, trainer.model);
    let m64 = Model::<f64>::load_expecting(&path, &tiny()).unwrap();
    let x = Tensor::<f32>::uniform(&[9, 16, 16, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let z32 = m32.encode(&x).unwrap().z;
    let z64 = m64.encode(&x.cast::<f64>()).unwrap().z;
    assert!(z64.max_abs_diff(&z32.cast()).unwrap() < 1e-4);

    let other = ModelConfig { d: 5, ..tiny() };
    assert!(matches!(Model::<f64>::load_expecting(&path, &other), Err(Error::Version(_))));
}

#[test]
fn lvid_clip_streams_through_encode_and_decode() {
    let model = Model::<f64>::new(tiny()).unwrap();
    let pixels = (0..13 * 16 * 24 * 3).map(|i| (i * 7 % 251) as u8).collect();
    let clip = RawVideo::new(13, 16, 24, pixels).unwrap();
    let x = clip.to_tensor::<f64>();
    let z = model.encode(&x).unwrap().z;
    assert_eq!(z.shape(), &[4, 2, 3, 4]);

    let mut st = StreamState::new(&model);
    let rows = stream_encode(&model, &split_rows(&x, &[5, 8]).unwrap(), &mut st).unwrap();
    assert_eq!(concat(&rows), z);

    let mut st = StreamState::new(&model);
    let frames = stream_decode(&model, &split_rows(&z, &[1, 3]).unwrap(), &mut st).unwrap();
    let y = concat(&frames);
    assert_eq!(y, model.decode(&z).unwrap());
    let out = RawVideo::from_tensor(&y.map(|v| v.clamp(-1.0, 1.0))).unwrap();
    assert_eq!((out.frames, out.height, out.width), (13, 16, 24));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn every_chunking_reproduces_the_full_pass(seed in any::<u64>(), blocks in 1usize..6) {
        let model = Model::<f64>::new(ModelConfig { seed, ..tiny() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = 1 + 4 * blocks;
        let x = Tensor::<f64>::uniform(&[frames, 8, 16, 3], 1.0, &mut rng);
        let z = model.encode(&x).unwrap().z;
        let plan = random_frame_chunking(frames, &mut rng);
        let mut st = StreamState::new(&model);
        let zs = concat(&stream_encode(&model, &split_rows(&x, &plan).unwrap(), &mut st).unwrap());
        prop_assert!(zs.max_abs_diff(&z).unwrap() < 1e-12);

        let rows = random_row_chunking(z.shape()[0], &mut rng);
        let mut st = StreamState::new(&model);
        let ys = concat(&stream_decode(&model, &split_rows(&z, &rows).unwrap(), &mut st).unwrap());
        prop_assert!(ys.max_abs_diff(&model.decode(&z).unwrap()).unwrap() < 1e-12);
    }
}
