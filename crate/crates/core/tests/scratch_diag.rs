//! Temporary diagnostic harness (ignored); not part of the suite.

use genaf_core::config::RunConfig;
use genaf_core::data::load_dataset;
use genaf_core::metrics::compute_ta;
use genaf_core::model::{cross_entropy, ArchSpec, DownstreamModel};
use genaf_core::pipeline::standard_baseline_config;
use genaf_core::pretrain::{linear_probe_accuracy, pretrain_in_place};
use genaf_core::stage1::train_stage1;

#[test]
#[ignore = "diagnostic"]
fn diagnose_learning() {
    let seed = 11u64;
    let cfg = RunConfig::desk(seed);
    let train = load_dataset(&cfg.data_train, None).unwrap();
    let test = load_dataset(&cfg.data_test, None).unwrap();
    println!(
        "train n={} classes={} | test n={}",
        train.len(),
        train.num_classes(),
        test.len()
    );

    // 1. Can the arch learn shapes from scratch with a healthy LR?
    let mut scratch = DownstreamModel::new(ArchSpec::desk(2), seed).unwrap();
    let mut cfg_scratch = standard_baseline_config(&cfg.stage1);
    cfg_scratch.lr_encoder = 1e-3;
    cfg_scratch.lr_classifier = 5e-3;
    let log = train_stage1(&mut scratch, &train, &cfg_scratch).unwrap();
    let ce_final = log.epoch_mean(log.last_epoch().unwrap(), |r| r.dat);
    println!(
        "scratch lr_e=1e-3: final train CE {:.4}, train TA {:.1}, test TA {:.1}",
        ce_final,
        compute_ta(&scratch, &train).unwrap(),
        compute_ta(&scratch, &test).unwrap()
    );

    // 2. Baseline exactly as configured (lr_e = 1e-4).
    let mut base = DownstreamModel::new(ArchSpec::desk(2), seed).unwrap();
    let log = train_stage1(&mut base, &train, &standard_baseline_config(&cfg.stage1)).unwrap();
    println!(
        "fresh-encoder baseline: final CE {:.4}, train TA {:.1}, test TA {:.1}",
        log.epoch_mean(log.last_epoch().unwrap(), |r| r.dat),
        compute_ta(&base, &train).unwrap(),
        compute_ta(&base, &test).unwrap()
    );

    // 3. Pretraining quality: contrastive losses + linear probe on the
    // downstream task.
    let pre = load_dataset(&cfg.pretrain.dataset_path, None).unwrap();
    let mut enc = DownstreamModel::new(cfg.arch.clone(), seed).unwrap();
    let plog = pretrain_in_place(&mut enc, &pre, &cfg.pretrain, seed).unwrap();
    println!("pretrain losses: {:?}", plog.epoch_losses);
    let probe = linear_probe_accuracy(&enc, &train, &test, 300, 0.5).unwrap();
    println!("linear probe on shapes after pretraining: {probe:.1}");

    // 4. Baseline on the pretrained encoder.
    let mut base2 = enc.clone();
    let log = train_stage1(&mut base2, &train, &standard_baseline_config(&cfg.stage1)).unwrap();
    println!(
        "pretrained baseline: final CE {:.4}, train TA {:.1}, test TA {:.1}",
        log.epoch_mean(log.last_epoch().unwrap(), |r| r.dat),
        compute_ta(&base2, &train).unwrap(),
        compute_ta(&base2, &test).unwrap()
    );

    // 5. Train-mode vs eval-mode disparity: compare train CE from the
    // log against eval-mode CE on the same data.
    let full = train.batch(&(0..256).collect::<Vec<_>>());
    let out = base2.forward(&full).unwrap();
    println!(
        "eval-mode CE on first 256 train samples: {:.4}",
        cross_entropy(&out.logits, full.labels()).unwrap()
    );
}

#[test]
#[ignore = "diagnostic"]
fn diagnose_capacity() {
    let seed = 11u64;
    let cfg = RunConfig::desk(seed);

    // Color task with the same trainer at desk scale.
    let blobs_train = load_dataset("synth:blobs:2:1600:32:1", None).unwrap();
    let blobs_test = load_dataset("synth:blobs:2:400:32:2", None).unwrap();
    let mut m = DownstreamModel::new(ArchSpec::desk(2), seed).unwrap();
    let mut c = standard_baseline_config(&cfg.stage1);
    c.lr_encoder = 1e-3;
    let log = train_stage1(&mut m, &blobs_train, &c).unwrap();
    println!(
        "blobs scratch: final CE {:.4}, train TA {:.1}, test TA {:.1}",
        log.epoch_mean(log.last_epoch().unwrap(), |r| r.dat),
        compute_ta(&m, &blobs_train).unwrap(),
        compute_ta(&m, &blobs_test).unwrap()
    );

    // Long-horizon shapes: 100 epochs from scratch.
    let train = load_dataset(&cfg.data_train, None).unwrap();
    let test = load_dataset(&cfg.data_test, None).unwrap();
    let mut m = DownstreamModel::new(ArchSpec::desk(2), seed).unwrap();
    let mut c = standard_baseline_config(&cfg.stage1);
    c.lr_encoder = 1e-3;
    c.epochs = 100;
    let log = train_stage1(&mut m, &train, &c).unwrap();
    for e in [0, 10, 25, 50, 75, 99] {
        println!("shapes scratch epoch {e}: CE {:.4}", log.epoch_mean(e, |r| r.dat));
    }
    println!(
        "shapes scratch 100ep: train TA {:.1}, test TA {:.1}",
        compute_ta(&m, &train).unwrap(),
        compute_ta(&m, &test).unwrap()
    );
}
