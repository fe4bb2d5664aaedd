//! Unit conversions. Everything inside the models is SI: m, s, veh, veh/m, veh/s.

pub fn kmh_to_ms(v: f64) -> f64 {
    v / 3.6
}

pub fn ms_to_kmh(v: f64) -> f64 {
    v * 3.6
}

pub fn vehh_to_vehs(q: f64) -> f64 {
    q / 3600.0
}

pub fn vehs_to_vehh(q: f64) -> f64 {
    q * 3600.0
}

pub fn vehkm_to_vehm(k: f64) -> f64 {
    k / 1000.0
}

pub fn vehm_to_vehkm(k: f64) -> f64 {
    k * 1000.0
}
