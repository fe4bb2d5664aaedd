//! Random networks shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mixnet::ctm::{ExpresswayTopology, FundamentalDiagram, RampAttachment};
use mixnet::demand::{DemandProfile, PiecewiseLinear};
use mixnet::mfd::{MfdParams, PathClass, TripLengthTable};
use mixnet::network::{ControlVector, Guidance, NetworkModel, NetworkState};
use mixnet::routes::{Node, Od, RouteChoiceParams};
use mixnet::units::{kmh_to_ms, vehh_to_vehs, vehkm_to_vehm};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..=hi)
}

/// Four distinct ramp cells `off_up < on_up < off_down < on_down`.
pub fn random_topology(rng: &mut ChaCha8Rng, up: usize, cells: usize, length: f64) -> ExpresswayTopology {
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, cells, 4).into_vec();
    picked.sort_unstable();
    ExpresswayTopology {
        cell_count: cells,
        cell_length: length,
        on_ramps: vec![
            RampAttachment { region: up, cell: picked[1] },
            RampAttachment { region: 1 - up, cell: picked[3] },
        ],
        off_ramps: vec![
            RampAttachment { region: up, cell: picked[0] },
            RampAttachment { region: 1 - up, cell: picked[2] },
        ],
    }
}

pub fn random_mfd(rng: &mut ChaCha8Rng) -> MfdParams {
    let ncr = uniform(rng, 800.0, 5000.0);
    MfdParams {
        free_flow_speed: uniform(rng, 6.0, 12.0),
        shape_xi: uniform(rng, 0.8, 1.5),
        shape_gamma: uniform(rng, 1.0, 2.0),
        critical_accumulation: ncr,
        jam_accumulation: ncr * uniform(rng, 2.0, 3.5),
        max_boundary_receiving: uniform(rng, 0.3, 1.5),
    }
}

pub fn random_lengths(rng: &mut ChaCha8Rng) -> TripLengthTable {
    let mut t = TripLengthTable::calibrated_default();
    for class in PathClass::ALL {
        t.set(class, uniform(rng, 400.0, 3000.0));
    }
    t
}

pub fn random_model(rng: &mut ChaCha8Rng, max_cells: usize) -> NetworkModel {
    let dt = 10.0;
    let vf = kmh_to_ms(uniform(rng, 60.0, 100.0));
    let cap = vehh_to_vehs(uniform(rng, 4000.0, 7000.0));
    let kj = vehkm_to_vehm(uniform(rng, 300.0, 400.0));
    let mainline = FundamentalDiagram::new(vf, cap, kj)
        .unwrap()
        .with_capacity_drop(cap * uniform(rng, 0.6, 1.0), uniform(rng, 0.0, 0.5))
        .unwrap();
    let ramp = FundamentalDiagram::new(
        kmh_to_ms(uniform(rng, 30.0, 50.0)),
        vehh_to_vehs(uniform(rng, 1800.0, 3500.0)),
        vehkm_to_vehm(uniform(rng, 220.0, 300.0)),
    )
    .unwrap();
    let cells = rng.gen_range(4..=max_cells);
    let length = uniform(rng, 300.0, 700.0);
    let topologies = [
        random_topology(rng, 0, cells, length),
        random_topology(rng, 1, cells, length),
    ];
    let mfd = [random_mfd(rng), random_mfd(rng)];
    let lengths = [random_lengths(rng), random_lengths(rng)];
    let choice = RouteChoiceParams {
        logit_sensitivity: uniform(rng, 0.0, 3.0),
        compliance: uniform(rng, 0.0, 1.0),
        time_unit: 60.0,
    };
    NetworkModel::new(mainline, ramp, topologies, mfd, lengths, choice, dt, 60.0).unwrap()
}

pub fn random_demand(rng: &mut ChaCha8Rng, horizon: f64) -> DemandProfile {
    let series = Od::canonical()
        .iter()
        .map(|_| {
            let a = uniform(rng, 0.0, horizon * 0.3);
            let b = a + uniform(rng, 0.0, horizon * 0.3);
            let c = b + uniform(rng, 0.0, horizon * 0.3);
            let d = c + uniform(rng, 1.0, horizon * 0.3);
            PiecewiseLinear::trapezoid(vehh_to_vehs(uniform(rng, 0.0, 3000.0)), a, b, c, d)
        })
        .collect();
    DemandProfile::new(series).unwrap()
}

pub fn random_initial(rng: &mut ChaCha8Rng, model: &NetworkModel) -> NetworkState {
    let mut s = model.empty_state();
    for (r, params) in model.mfd.iter().enumerate() {
        let total = uniform(rng, 0.0, params.jam_accumulation * 0.6);
        let own: Vec<usize> = model
            .routes
            .routes
            .iter()
            .filter(|route| route.nodes[0] == Node::Region(r))
            .map(|route| route.id)
            .collect();
        let w: Vec<f64> = own.iter().map(|_| rng.gen::<f64>()).collect();
        let sum: f64 = w.iter().sum();
        for (&y, wy) in own.iter().zip(&w) {
            s.regions[r].accumulation[y] = total * wy / sum;
        }
    }
    s
}

pub fn random_controls(rng: &mut ChaCha8Rng, n: usize) -> Vec<ControlVector> {
    (0..n)
        .map(|_| {
            let guidance = if rng.gen_bool(0.5) {
                Guidance::FollowDriver
            } else {
                Guidance::Splits(std::array::from_fn(|_| rng.gen()))
            };
            ControlVector {
                guidance,
                perimeter: [rng.gen(), rng.gen()],
                metering: [[rng.gen(), rng.gen()], [rng.gen(), rng.gen()]],
            }
        })
        .collect()
}

