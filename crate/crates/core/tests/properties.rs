use proptest::prelude::*;

use mixnet::ctm::{cell_demand, cell_receiving, mainline_flow, on_ramp_flow, FundamentalDiagram};
use mixnet::network::{ControlVector, Guidance, NetworkState};
use mixnet::pso::{minimize, Evaluation, PsoConfig};
use mixnet::routes::{assign_demand, blend_compliance, logit_split, RouteChoiceParams};

mod common;
use common::*;

fn diagram() -> impl Strategy<Value = FundamentalDiagram> {
    (15.0..30.0f64, 1.0..2.0f64, 0.25..0.4f64, 0.6..1.0f64, 0.0..0.6f64).prop_map(|(vf, cap, kj, cb, lambda)| {
        FundamentalDiagram::new(vf, cap, kj)
            .unwrap()
            .with_capacity_drop(cap * cb, lambda)
            .unwrap()
    })
}

fn all_finite_nonneg(s: &NetworkState) -> bool {
    let exp = s
        .expressways
        .iter()
        .flat_map(|e| e.mainline.iter().chain(&e.on_ramp).chain(&e.off_ramp).chain(&e.upstream_queue));
    let reg = s.regions.iter().flat_map(|r| r.accumulation.iter());
    let q = s.origin_queue.iter().flatten();
    exp.chain(reg).chain(q).all(|v| v.is_finite() && *v >= 0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logit_depends_only_on_the_time_difference(a in 0.0..5000.0f64, b in 0.0..5000.0f64, c in 0.0..5000.0f64, mu in 0.0..5.0f64) {
        let p = RouteChoiceParams { logit_sensitivity: mu, compliance: 0.5, time_unit: 60.0 };
        let s = logit_split(a, b, &p);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s - logit_split(a + c, b + c, &p)).abs() < 1e-9);
        prop_assert!((s + logit_split(b, a, &p) - 1.0).abs() < 1e-12);
        if a < b {
            prop_assert!(s >= 0.5);
        }
    }

    #[test]
    fn blended_split_lies_between_driver_and_guidance(d in 0.0..=1.0f64, g in 0.0..=1.0f64, e in 0.0..=1.0f64) {
        let r = blend_compliance(d, g, e);
        prop_assert!(r >= d.min(g) - 1e-15 && r <= d.max(g) + 1e-15);
        prop_assert_eq!(blend_compliance(d, g, 0.0), d);
    }

    #[test]
    fn sending_and_receiving_respect_the_diagram(fd in diagram(), k in prop::collection::vec(0.0..0.1f64, 1..5), bottleneck: bool) {
        let total: f64 = k.iter().sum();
        let send = cell_demand(&k, total, &fd, bottleneck);
        let cap = fd.effective_capacity(total, bottleneck);
        let sum: f64 = send.iter().sum();
        prop_assert!(send.iter().all(|&s| s >= 0.0));
        prop_assert!((sum - (fd.free_flow_speed * total).min(cap)).abs() <= 1e-12);
        for (s, ky) in send.iter().zip(&k) {
            prop_assert!(*s <= fd.free_flow_speed * ky + 1e-15);
        }
        if total <= fd.jam_density {
            let r = cell_receiving(total, &fd, bottleneck).unwrap();
            prop_assert!(r >= 0.0 && r <= cap);
        }
    }

    #[test]
    fn fifo_flows_never_exceed_demand_or_supply(d in prop::collection::vec(0.0..2.0f64, 1..6), supply in 0.0..4.0f64, ramp in 0.0..2.0f64) {
        let total: f64 = d.iter().sum();
        let out = on_ramp_flow(&d, supply);
        let sum: f64 = out.iter().sum();
        prop_assert!(out.iter().zip(&d).all(|(o, dy)| *o >= 0.0 && *o <= *dy + 1e-15));
        prop_assert!((sum - total.min(supply)).abs() < 1e-12);
        let main = mainline_flow(&d, supply, ramp);
        prop_assert!(main.iter().sum::<f64>() <= (supply - ramp).max(0.0) + 1e-12);
    }

    #[test]
    fn assignment_preserves_od_demand(seed: u64, splits in prop::array::uniform6(0.0..=1.0f64)) {
        let mut r = rng(seed);
        let model = random_model(&mut r, 8);
        let od: Vec<f64> = (0..model.routes.ods.len()).map(|_| uniform(&mut r, 0.0, 2.0)).collect();
        let q = assign_demand(&model.routes, &od, &splits);
        prop_assert!(q.iter().all(|&v| v >= 0.0));
        prop_assert!((q.iter().sum::<f64>() - od.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn every_step_conserves_vehicles_and_keeps_states_feasible(seed: u64, steps in 1usize..120) {
        let mut r = rng(seed);
        let model = random_model(&mut r, 10);
        let demand = random_demand(&mut r, steps as f64 * model.sim_step);
        let initial = random_initial(&mut r, &model);
        let controls = random_controls(&mut r, steps.div_ceil(model.steps_per_control));
        let run = model.rollout(&initial, &controls, &demand, steps, model.choice.compliance, true).unwrap();
        let t = run.trajectory.unwrap();
        for (w, rec) in t.states.windows(2).zip(&t.records) {
            prop_assert!(all_finite_nonneg(&w[1]));
            prop_assert!(model.check_state(&w[1]).is_ok());
            let before = model.vehicles(&w[0]).total();
            let after = model.vehicles(&w[1]).total();
            let expect = before + model.sim_step * (rec.generated - rec.completed());
            prop_assert!((after - expect).abs() <= 1e-9 * before.max(1.0));
        }
    }

    #[test]
    fn closed_controls_hold_vehicles_back(seed: u64) {
        let mut r = rng(seed);
        let model = random_model(&mut r, 10);
        let initial = random_initial(&mut r, &model);
        let closed = ControlVector { guidance: Guidance::FollowDriver, perimeter: [0.0; 2], metering: [[0.0; 2]; 2] };
        let demand = random_demand(&mut r, 600.0);
        let run = model.rollout(&initial, &[closed], &demand, 12, 0.5, true).unwrap();
        for rec in &run.trajectory.unwrap().records {
            prop_assert_eq!(rec.boundary_transfer, [0.0; 2]);
            prop_assert!(rec.on_ramp_discharge.iter().flatten().all(|&v| v == 0.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pso_stays_in_the_box_and_never_gets_worse(seed: u64, dim in 1usize..6, centre in prop::collection::vec(-0.5..1.5f64, 6)) {
        let f = |x: &[f64]| x.iter().zip(&centre).map(|(a, c)| (a - c).powi(2)).sum::<f64>();
        let config = PsoConfig { swarm_size: 10, iterations: 30, seed, ..PsoConfig::default() };
        let par = minimize(f, dim, &[], &config, Evaluation::Parallel);
        let seq = minimize(f, dim, &[], &config, Evaluation::Sequential);
        prop_assert_eq!(&par, &seq);
        prop_assert!(par.best.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(par.best_value, f(&par.best));
        prop_assert!(par.history.windows(2).all(|w| w[1] <= w[0]));
        // an injected starting point bounds the result
        let start = vec![0.5; dim];
        let seeded = minimize(f, dim, std::slice::from_ref(&start), &config, Evaluation::Sequential);
        prop_assert!(seeded.best_value <= f(&start));
    }
}
