use daff_pinn::config::TrainConfig;
use daff_pinn::model::Model;
use daff_pinn::problems::{boundary_max_abs, sample_collocation};
use daff_pinn::trainer::{assemble_loss, train, Objective, Phase, StopReason};
use daff_pinn::Error;

fn cfg(problem: &str, encoder: &str, extra: &str) -> TrainConfig {
    let text = format!(
        r#"
seed = 3
[problem]
kind = "{problem}"
[encoder]
{encoder}
[network]
layers = 2
units = 16
[training]
batch_size = 64
validate_every = 20
grid_n = 21
{extra}
"#
    );
    TrainConfig::from_toml_str(&text).unwrap()
}

fn with_epochs(mut c: TrainConfig, epochs: usize, lbfgs: usize) -> TrainConfig {
    c.optimizer.epochs = epochs;
    c.optimizer.lbfgs_iters = lbfgs;
    c.optimizer.lr = 1e-2;
    c
}

#[test]
fn adam_reduces_the_monitored_loss() {
    let c = with_epochs(cfg("helmholtz", "kind = \"identity\"", ""), 150, 0);
    let out = train(&c, None).unwrap();
    let r = &out.report;
    assert_eq!(r.records.len(), 150);
    assert_eq!(r.stop_reason, StopReason::EpochCap);
    assert!(r.records.last().unwrap().monitored < 0.5 * r.records[0].monitored);
    assert!(r.best_validation <= r.final_validation);
    assert!(r.records[0].validation.is_some());
}

#[test]
fn same_seed_same_summary() {
    let c = with_epochs(cfg("helmholtz", "kind = \"rff\"\nvariances = [1.0]\nfeatures_per_block = 8", ""), 40, 5);
    let mut a = train(&c, None).unwrap().report.summary();
    let mut b = train(&c, None).unwrap().report.summary();
    a.wall_time = 0.0;
    b.wall_time = 0.0;
    assert_eq!(a, b);
}

#[test]
fn daff_runs_carry_one_term_and_no_balancer() {
    let c = with_epochs(cfg("kirchhoff", "kind = \"daff\"\ncomp_types = [1]\nmn_values = [1]", ""), 30, 5);
    assert!(!c.use_bias());
    let out = train(&c, None).unwrap();
    let r = &out.report;
    assert_eq!(r.term_names, ["L_r"]);
    assert!(!r.balanced);
    assert_eq!(r.balancer_updates, 0);
    assert!(r.records.iter().all(|e| e.terms.len() == 1 && e.weights == [1.0]));
    assert!(!r.to_csv().contains("lambda"));
    assert!(boundary_max_abs(&out.best, &out.best.problem, 250).unwrap() <= 1e-12);
}

#[test]
fn balanced_runs_log_weights() {
    let c = with_epochs(cfg("kirchhoff", "kind = \"identity\"", ""), 25, 0);
    let r = train(&c, None).unwrap().report;
    assert_eq!(r.term_names, ["L_r", "L_b1", "L_b2"]);
    assert!(r.balanced);
    assert_eq!(r.balancer_updates, 24);
    for e in &r.records {
        assert!((e.weights.iter().sum::<f64>() - 3.0).abs() < 1e-9);
    }
    assert!(r.to_csv().lines().next().unwrap().contains("lambda_L_b2"));
}

#[test]
fn lbfgs_phase_never_increases_the_loss() {
    let c = with_epochs(cfg("helmholtz", "kind = \"daff\"\ncomp_types = [1]\nmn_values = [2, 8]", ""), 20, 30);
    let r = train(&c, None).unwrap().report;
    let lb: Vec<_> = r.records.iter().filter(|e| e.phase == Phase::Lbfgs).collect();
    assert!(!lb.is_empty());
    for w in lb.windows(2) {
        assert!(w[1].monitored <= w[0].monitored * (1.0 + 1e-12));
    }
}

#[test]
fn pointwise_loss_agrees_with_the_tape() {
    let c = cfg("kirchhoff", "kind = \"identity\"", "");
    let model = Model::from_config(&c, None).unwrap();
    let batch = sample_collocation(&model.problem.domain(), 64, 1).unwrap();
    let l = assemble_loss(&model.problem, &model, &batch).unwrap();
    assert_eq!(l.names, ["L_r", "L_b1", "L_b2"]);
    assert!(l.get("L_zz").is_none());
    let groups = model.problem.loss_groups(&batch, false).unwrap();
    let obj = Objective::new(&model.encoder, &groups, 3).unwrap();
    let e = obj.evaluate(&model.net, &mut |t: &[f64]| Ok(vec![1.0; t.len()])).unwrap();
    for (a, b) in l.values.iter().zip(&e.terms) {
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1e-300), "{a} vs {b}");
    }
}

#[test]
fn invalid_configs_list_every_offending_key() {
    let text = r#"
[problem]
kind = "helmholtz"
[encoder]
kind = "identity"
[optimizer]
lr = -1.0
[training]
batch_size = 30
"#;
    match TrainConfig::from_toml_str(text) {
        Err(Error::Config { key, .. }) => {
            assert!(key.contains("optimizer.lr"), "{key}");
            assert!(key.contains("training.batch_size"), "{key}");
        }
        other => panic!("{other:?}"),
    }
    match TrainConfig::from_toml_str("[problem]\nkind = \"helmholtz\"\nbogus = 1\n[encoder]\nkind = \"identity\"") {
        Err(Error::Config { key, .. }) => assert_eq!(key, "bogus"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_round_trips_through_toml() {
    let c = cfg("kirchhoff", "kind = \"daff\"\ncomp_types = [1, 2]\nmn_values = [1, -1]", "");
    assert_eq!(TrainConfig::from_toml_str(&c.to_toml()).unwrap(), c);
}
