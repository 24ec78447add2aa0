use padre_core::adapters::{sima_forward, SimaParams};
use padre_core::bench::{emit_csv, parse_csv, Precision};
use padre_core::block::CombineWeights;
use padre_core::{
    run_bench, rel_err, BenchConfig, BlockConfig, Container, Denominator, FlopLedger, Mixer, PadreBlock, RationalPadreBlock, Scheme, Side,
    Tensor, WMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar(side: Side, w: f64) -> Mixer<f64> {
    Mixer::dense(side, Tensor::from_vec(1, 1, vec![w]).unwrap()).unwrap()
}

fn token_sum(n: usize) -> Mixer<f64> {
    Mixer::low_rank(Side::Token, Tensor::ones(n, 1), Tensor::ones(1, n)).unwrap()
}

/// Single-channel SimA as numerator `Q (1^T (K V))` over denominator
/// `(1^T Q)(1^T K)`, valid where the projections are positive.
fn sima_rational(n: usize, wq: f64, wk: f64, wv: f64) -> RationalPadreBlock<f64> {
    let num = PadreBlock::builder(n, 1, 3)
        .b(1, scalar(Side::Channel, wk))
        .b(2, scalar(Side::Channel, wv))
        .b(3, scalar(Side::Channel, wq))
        .c(2, token_sum(n))
        .weights(CombineWeights::ones(WMode::ScalarPerDegree, n, 1, 3))
        .degree_mask([3])
        .build()
        .unwrap();
    let den = PadreBlock::builder(n, 1, 2)
        .a(1, token_sum(n))
        .b(1, scalar(Side::Channel, wq))
        .a(2, token_sum(n))
        .b(2, scalar(Side::Channel, wk))
        .weights(CombineWeights::ones(WMode::ScalarPerDegree, n, 1, 2))
        .degree_mask([2])
        .build()
        .unwrap();
    RationalPadreBlock::new(num, Denominator::Cascade(den), 0.0, false).unwrap()
}

#[test]
fn single_channel_sima_is_a_rational_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let n = rng.gen_range(1..=16);
        let (wq, wk, wv) = (rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0), rng.gen_range(-2.0..2.0));
        let params = SimaParams::new(
            Tensor::from_vec(1, 1, vec![wq]).unwrap(),
            Tensor::from_vec(1, 1, vec![wk]).unwrap(),
            Tensor::from_vec(1, 1, vec![wv]).unwrap(),
        )
        .unwrap();
        let block = sima_rational(n, wq, wk, wv);
        let x = Tensor::from_fn(n, 1, |_, _| rng.gen_range(0.05..1.0));
        let direct = sima_forward(&params, &x, &mut FlopLedger::new()).unwrap();
        let rational = block.eval(&x, &mut FlopLedger::new()).unwrap();
        assert!(rel_err(&rational, &direct) <= 1e-10);
    }
}

#[test]
fn config_file_to_container_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = BlockConfig::new(9, 3, 3);
    cfg.seed = 5;
    cfg.w_mode = WMode::ScalarPerDegree;
    let cfg_path = dir.path().join("block.json");
    cfg.save(&cfg_path).unwrap();
    let loaded = BlockConfig::load(&cfg_path).unwrap();
    assert_eq!(loaded, cfg);

    let block: PadreBlock<f64> = loaded.build_block().unwrap();
    let weights = dir.path().join("block.padre");
    Container::from_block(&block).unwrap().write(&weights).unwrap();
    let back: PadreBlock<f64> = Container::read(&weights).unwrap().to_block().unwrap();
    let x = Tensor::random_uniform(9, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let (a, b) = (block.eval(&x, &mut FlopLedger::new()).unwrap(), back.eval(&x, &mut FlopLedger::new()).unwrap());
    assert_eq!(a.data(), b.data());
}

#[test]
fn small_sweep_writes_and_reads_csv() {
    let cfg = BenchConfig {
        schemes: Scheme::ALL.to_vec(),
        n_list: vec![16],
        channels: 8,
        reps: 5,
        warmup: 1,
        seed: 3,
        precision: Precision::F32,
    };
    let records = run_bench(&cfg).unwrap();
    assert_eq!(records.len(), Scheme::ALL.len());
    for r in &records {
        assert!(r.p10_s <= r.median_s && r.median_s <= r.p90_s);
        assert!(r.flops > 0);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bench.csv");
    emit_csv(&records, &path).unwrap();
    assert_eq!(parse_csv(std::fs::File::open(&path).unwrap()).unwrap(), records);

    emit_csv(&[], &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "scheme,N,D,d,flops,median_s,p10_s,p90_s,reps,seed\n");
}
