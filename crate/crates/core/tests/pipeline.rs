use std::sync::Arc;

use seqfa_core::approx::ProposalKind;
use seqfa_core::distributions::RngStream;
use seqfa_core::model::{simulate_scenario, FactorModel, Link, ModelSpec, Scenario};
use seqfa_core::modelselect::{lbf_trajectory, run_menu, ComparisonTable, EngineConfig, MenuHooks, ModelMenu};
use seqfa_core::smc::{Checkpoint, FactorSequential, InitSettings, Smc, SmcSettings};

#[test]
fn latent_run_resumes_from_json_checkpoint() {
    let data = Arc::new(simulate_scenario(&Scenario::Binary1, 24, &mut RngStream::new(1, 0)).unwrap());
    let model = FactorModel::new(ModelSpec::exploratory(6, 1, Link::Logit).unwrap(), data).unwrap();
    let seq = FactorSequential::new(model, ProposalKind::Laplace);
    let settings = SmcSettings::new(150, 4);

    let mut straight = Smc::from_prior(&seq, settings.clone()).unwrap();
    straight.run().unwrap();

    let mut first = Smc::from_prior(&seq, settings).unwrap();
    first.run_to(11).unwrap();
    let json = first.checkpoint().to_json().unwrap();
    drop(first);
    let mut resumed = Smc::resume(&seq, Checkpoint::from_json(&json).unwrap()).unwrap();
    resumed.run().unwrap();

    assert_eq!(straight.ledger(), resumed.ledger());
    assert_eq!(straight.particles(), resumed.particles());
    assert_eq!(straight.triggers(), resumed.triggers());
    // latent rows accumulate with the data
    assert_eq!(resumed.particles().particles[0].len(), resumed.particles().theta_dim + 24);
}

#[test]
fn menu_ledgers_are_consistent() {
    let data = Arc::new(simulate_scenario(&Scenario::Continuous1, 45, &mut RngStream::new(2, 0)).unwrap());
    let mut menu = ModelMenu::new();
    menu.push("EZ", ModelSpec::exact_zero(6, 2, Link::Identity).unwrap()).unwrap();
    menu.push("EFA1", ModelSpec::exploratory(6, 1, Link::Identity).unwrap()).unwrap();
    let config = EngineConfig {
        n_particles: 120,
        init: InitSettings {
            is_samples: 3000,
            ..InitSettings::batch(15)
        },
        ..EngineConfig::default()
    };
    let runs = run_menu(&menu, data, &config, 9, 0, MenuHooks::default()).unwrap();
    for r in &runs {
        assert!(r.ledger.is_absolute());
        assert_eq!(r.ledger.cumulative_at(45), Some(r.ledger.total()));
        let block = r.block.as_ref().expect("importance block estimate");
        assert_eq!(r.ledger.cumulative_at(15), Some(block.log_evidence));
        assert!(block.std_error.is_finite() && block.std_error >= 0.0);
        assert!(r.ledger.rows().all(|(_, inc, cum)| inc.is_finite() && cum.is_finite()));
    }
    let table = ComparisonTable::from_runs(&runs).unwrap();
    let ab = table.lbf_between("EZ", "EFA1").unwrap();
    let ba = table.lbf_between("EFA1", "EZ").unwrap();
    assert_eq!(ab, -ba);
    let traj = lbf_trajectory(&runs[0].ledger, &runs[1].ledger);
    assert_eq!(traj.last().unwrap().1, ab);
}

#[test]
fn mismatched_menu_is_rejected() {
    let data = Arc::new(simulate_scenario(&Scenario::Binary1, 10, &mut RngStream::new(3, 0)).unwrap());
    let mut menu = ModelMenu::new();
    menu.push("EZ", ModelSpec::exact_zero(6, 2, Link::Identity).unwrap()).unwrap();
    let err = run_menu(&menu, data, &EngineConfig::default(), 1, 0, MenuHooks::default());
    assert!(err.is_err());
}
