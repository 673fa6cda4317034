mod common;

use common::{distributed_forward, random_tensor, rel_err};
use dfno_core::comm::run_inproc;
use dfno_core::fno::{init_params, load_checkpoint, save_checkpoint, DistributedFno, FnoConfig, FnoParams};

#[test]
fn save_at_three_ranks_load_at_two() {
    let cfg = FnoConfig { grid: [8, 12, 4, 4], modes: [2, 3, 2, 1], num_blocks: 2, num_ranks: 3, ..FnoConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    run_inproc(3, |comm| {
        let r = comm.rank();
        let model = DistributedFno::new(cfg.clone(), init_params::<f64>(&cfg, 4, r).unwrap(), r).unwrap();
        save_checkpoint(comm, &model, dir.path(), &[("seed", "4".into())]).unwrap();
    })
    .unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert!(manifest.contains("seed=4\n") && manifest.contains("modes=2,3,2,1\n"), "{manifest}");

    let two = FnoConfig { num_ranks: 2, ..cfg.clone() };
    for r in 0..2 {
        let (loaded_cfg, params): (FnoConfig, FnoParams<f64>) = load_checkpoint(dir.path(), 2, r).unwrap();
        assert_eq!(loaded_cfg, two);
        assert_eq!(params, init_params::<f64>(&two, 4, r).unwrap());
    }
    let x = random_tensor::<f64>(cfg.input_shape(), 1);
    assert!(rel_err(&distributed_forward(&two, 4, &x), &distributed_forward(&cfg, 4, &x)) < 1e-12);
}

#[test]
fn dtype_and_missing_files_are_errors() {
    let cfg = FnoConfig { grid: [4, 4, 4, 2], modes: [1, 1, 1, 1], num_blocks: 1, ..FnoConfig::default() };
    let dir = tempfile::tempdir().unwrap();
    run_inproc(1, |comm| {
        let model = DistributedFno::new(cfg.clone(), init_params::<f32>(&cfg, 1, 0).unwrap(), 0).unwrap();
        save_checkpoint(comm, &model, dir.path(), &[]).unwrap();
    })
    .unwrap();
    assert!(load_checkpoint::<f64>(dir.path(), 1, 0).is_err());
    assert!(load_checkpoint::<f32>(dir.path(), 1, 0).is_ok());
    std::fs::remove_file(dir.path().join("spectral_0.dtns")).unwrap();
    assert!(load_checkpoint::<f32>(dir.path(), 1, 0).is_err());
}
