//! Bus admittance matrix assembly and its load/generator partition.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::netmodel::{BusKind, Network};

/// Complex nodal admittance matrix in sparse triplet form with a
/// deterministic (bus id ascending, row-major) entry order.
#[derive(Debug, Clone)]
pub struct YBus {
    pub bus_ids: Vec<usize>,
    index_of: BTreeMap<usize, usize>,
    entries: BTreeMap<(usize, usize), Complex64>,
}

impl YBus {
    pub fn n(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn index_of(&self, bus_id: usize) -> Option<usize> {
        self.index_of.get(&bus_id).copied()
    }

    /// Entry by matrix index; absent entries are zero.
    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.entries
            .get(&(i, j))
            .copied()
            .unwrap_or(Complex64::new(0.0, 0.0))
    }

    /// Entry by bus ids.
    pub fn get_by_bus(&self, bus_i: usize, bus_j: usize) -> Complex64 {
        match (self.index_of(bus_i), self.index_of(bus_j)) {
            (Some(i), Some(j)) => self.get(i, j),
            _ => Complex64::new(0.0, 0.0),
        }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Stored entries in deterministic row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, Complex64)> + '_ {
        self.entries.iter().map(|(&(i, j), &v)| (i, j, v))
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let n = self.n();
        let mut m = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        for (i, j, v) in self.iter() {
            m[(i, j)] = v;
        }
        m
    }

    fn add(&mut self, i: usize, j: usize, v: Complex64) {
        let e = self
            .entries
            .entry((i, j))
            .or_insert(Complex64::new(0.0, 0.0));
        *e += v;
        if e.norm() == 0.0 {
            self.entries.remove(&(i, j));
        }
    }
}

/// Blocks of the admittance matrix under a `[load | generator]` bus
/// reordering, as needed by the L-index.
#[derive(Debug, Clone)]
pub struct PartitionedY {
    pub load_bus_ids: Vec<usize>,
    pub gen_bus_ids: Vec<usize>,
    pub y_ll: DMatrix<Complex64>,
    pub y_lg: DMatrix<Complex64>,
    pub y_gl: DMatrix<Complex64>,
    pub y_gg: DMatrix<Complex64>,
}

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("partition requires at least one generator (pv or slack) bus")]
    NoGeneratorBus,
    #[error("partition requires at least one non-generator bus")]
    NoLoadBus,
}

/// Assemble the bus admittance matrix from in-service branches using the
/// standard pi model: series admittance on the off-diagonals (negated),
/// half the charging susceptance added to each terminal diagonal.
pub fn build_ybus(network: &Network) -> YBus {
    let bus_ids = network.bus_order();
    let index_of: BTreeMap<usize, usize> = bus_ids
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let mut y = YBus {
        bus_ids,
        index_of,
        entries: BTreeMap::new(),
    };
    for br in network.in_service_branches() {
        let ys = br.series_admittance();
        let ych = Complex64::new(0.0, br.charging / 2.0);
        let i = y.index_of[&br.from_bus];
        let j = y.index_of[&br.to_bus];
        y.add(i, i, ys + ych);
        y.add(j, j, ys + ych);
        y.add(i, j, -ys);
        y.add(j, i, -ys);
    }
    y
}

/// Permute the matrix into `[load | generator]` blocks. Load side means
/// PQ buses; generator side means PV and slack buses, regardless of any
/// reactive limit state.
pub fn partition(ybus: &YBus, network: &Network) -> Result<PartitionedY, PartitionError> {
    let mut load_ids = Vec::new();
    let mut gen_ids = Vec::new();
    for &id in &ybus.bus_ids {
        match network.bus(id).map(|b| b.kind) {
            Some(BusKind::Pq) => load_ids.push(id),
            Some(_) => gen_ids.push(id),
            None => {}
        }
    }
    if gen_ids.is_empty() {
        return Err(PartitionError::NoGeneratorBus);
    }
    if load_ids.is_empty() {
        return Err(PartitionError::NoLoadBus);
    }
    let block = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |r, c| {
            ybus.get_by_bus(rows[r], cols[c])
        })
    };
    Ok(PartitionedY {
        y_ll: block(&load_ids, &load_ids),
        y_lg: block(&load_ids, &gen_ids),
        y_gl: block(&gen_ids, &load_ids),
        y_gg: block(&gen_ids, &gen_ids),
        load_bus_ids: load_ids,
        gen_bus_ids: gen_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caseio;
    use crate::netmodel::{Branch, Bus, BusKind, Network};
    use approx::assert_abs_diff_eq;

    fn wscc9() -> Network {
        caseio::parse_case(include_str!("../data/wscc9.case")).unwrap().0
    }

    fn two_bus(x: f64) -> Network {
        Network {
            buses: vec![
                Bus { id: 1, kind: BusKind::Slack, v_min: 0.9, v_max: 1.1, v_setpoint: Some(1.0) },
                Bus { id: 2, kind: BusKind::Pq, v_min: 0.9, v_max: 1.1, v_setpoint: None },
            ],
            branches: vec![Branch {
                from_bus: 1,
                to_bus: 2,
                resistance: 0.0,
                reactance: x,
                charging: 0.0,
                rating: 1.0,
                in_service: true,
            }],
            generators: vec![],
            loads: vec![],
            facts_devices: vec![],
            base_mva: 100.0,
        }
    }

    #[test]
    fn single_branch_pi_model() {
        let y = build_ybus(&two_bus(0.1));
        assert_abs_diff_eq!(y.get(0, 0).im, -10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.get(0, 1).im, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.get(1, 0).im, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(y.get(1, 1).im, -10.0, epsilon = 1e-12);
        assert_eq!(y.get(0, 0).re, 0.0);
    }

    #[test]
    fn wscc_transformer_branch_magnitude() {
        let y = build_ybus(&wscc9());
        // branch 1-4 is pure reactance 0.0576
        let off = y.get_by_bus(1, 4);
        assert_abs_diff_eq!(off.norm(), 1.0 / 0.0576, epsilon = 1e-4);
        assert_abs_diff_eq!(off.norm(), 17.3611, epsilon = 1e-4);
    }

    #[test]
    fn ybus_symmetry_and_outage_touches_four_entries() {
        let net = wscc9();
        let y0 = build_ybus(&net);
        for (i, j, v) in y0.iter() {
            assert_abs_diff_eq!((v - y0.get(j, i)).norm(), 0.0, epsilon = 1e-14);
        }
        let y1 = build_ybus(&net.apply_outage(4, 9).unwrap());
        assert_abs_diff_eq!(y1.get_by_bus(4, 9).norm(), 0.0, epsilon = 1e-14);
        let mut changed = 0;
        for i in 0..y0.n() {
            for j in 0..y0.n() {
                if (y0.get(i, j) - y1.get(i, j)).norm() > 1e-14 {
                    changed += 1;
                }
            }
        }
        assert_eq!(changed, 4);
    }

    #[test]
    fn row_sums_equal_shunt_terms() {
        // with no bus shunts, each row sums to the attached charging
        let net = wscc9();
        let y = build_ybus(&net);
        for (r, &bus) in y.bus_ids.iter().enumerate() {
            let sum: Complex64 = (0..y.n()).map(|c| y.get(r, c)).sum();
            let charge: f64 = net
                .in_service_branches()
                .filter(|b| b.from_bus == bus || b.to_bus == bus)
                .map(|b| b.charging / 2.0)
                .sum();
            assert_abs_diff_eq!(sum.re, 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(sum.im, charge, epsilon = 1e-10);
        }
    }

    #[test]
    fn partition_dimensions_and_reassembly() {
        let net = wscc9();
        let y = build_ybus(&net);
        let p = partition(&y, &net).unwrap();
        assert_eq!(p.load_bus_ids, vec![4, 5, 6, 7, 8, 9]);
        assert_eq!(p.gen_bus_ids, vec![1, 2, 3]);
        assert_eq!(p.y_ll.shape(), (6, 6));
        assert_eq!(p.y_lg.shape(), (6, 3));
        assert_eq!(p.y_gl.shape(), (3, 6));
        assert_eq!(p.y_gg.shape(), (3, 3));
        // reassemble under the recorded permutation: exact equality
        for (r, &bi) in p.load_bus_ids.iter().enumerate() {
            for (c, &bj) in p.load_bus_ids.iter().enumerate() {
                assert_eq!(p.y_ll[(r, c)], y.get_by_bus(bi, bj));
            }
            for (c, &bj) in p.gen_bus_ids.iter().enumerate() {
                assert_eq!(p.y_lg[(r, c)], y.get_by_bus(bi, bj));
            }
        }
        for (r, &bi) in p.gen_bus_ids.iter().enumerate() {
            for (c, &bj) in p.gen_bus_ids.iter().enumerate() {
                assert_eq!(p.y_gg[(r, c)], y.get_by_bus(bi, bj));
            }
        }
    }

    #[test]
    fn partition_of_two_bus_system() {
        let net = two_bus(0.05);
        let y = build_ybus(&net);
        let p = partition(&y, &net).unwrap();
        assert_eq!(p.y_ll.shape(), (1, 1));
        assert_eq!(p.y_lg.shape(), (1, 1));
    }

    #[test]
    fn all_generator_network_rejected() {
        let mut net = two_bus(0.05);
        net.buses[1].kind = BusKind::Pv;
        net.buses[1].v_setpoint = Some(1.0);
        let y = build_ybus(&net);
        assert!(matches!(partition(&y, &net), Err(PartitionError::NoLoadBus)));
    }
}
