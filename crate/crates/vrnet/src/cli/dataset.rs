//! Dataset pipeline and its JSON-Lines file format.
//!
//! One record per line with a fixed field order and 17-significant-digit
//! decimal floats, so parse -> re-serialize is byte-identical. The builder
//! runs solves in parallel but orders records deterministically by
//! (mode set, amplitude index, threshold index).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;

use crate::bounds::{inside_envelope, PhasePair};
use crate::error::{Error, Result};
use crate::fftsolver::{homogenize, SolverConfig};
use crate::linalg::Mat;
use crate::mandel::{format_f64, plane_strain_stiffness, IsotropicPhase, MandelMatrix};
use crate::microgen::{equispaced_taus, field, range_normalize, threshold_hard, AmplitudeGrid};
use crate::surrogate::{Split, TrainSample};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Upper-triangle order of the stored stiffness entries.
const TRIU: [(usize, usize); 6] = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)];

/// One labeled realization.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DatasetRecord {
    pub m1: usize,
    pub m2: usize,
    pub a: Vec<f64>,
    pub tau: f64,
    pub c0: f64,
    /// upper triangle C11, C22, C33, C12, C13, C23 of the 3x3 Mandel matrix
    pub cbar: Vec<f64>,
    pub split: String,
}

impl DatasetRecord {
    pub fn grid(&self) -> Result<AmplitudeGrid> {
        AmplitudeGrid::new(self.m1, self.m2, self.a.clone())
    }

    pub fn stiffness(&self) -> Result<MandelMatrix> {
        if self.cbar.len() != 6 {
            return Err(Error::Parse(format!("cbar has {} entries, want 6", self.cbar.len())));
        }
        let mut m = Mat::zeros(3, 3);
        for (&(i, j), &v) in TRIU.iter().zip(&self.cbar) {
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        MandelMatrix::new(3, m.data())
    }

    pub fn to_train_sample(&self) -> Result<TrainSample> {
        Ok(TrainSample {
            grid: self.grid()?,
            tau: self.tau,
            c0: self.c0,
            cbar: self.stiffness()?,
            split: match self.split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                other => return Err(Error::Parse(format!("unknown split tag '{other}'"))),
            },
        })
    }

    /// Canonical one-line JSON encoding.
    pub fn to_json_line(&self) -> String {
        let mut s = String::with_capacity(256);
        write!(s, "{{\"m1\":{},\"m2\":{},\"a\":[", self.m1, self.m2).unwrap();
        for (k, v) in self.a.iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            s.push_str(&format_f64(*v));
        }
        write!(s, "],\"tau\":{},\"c0\":{},\"cbar\":[", format_f64(self.tau), format_f64(self.c0))
            .unwrap();
        for (k, v) in self.cbar.iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            s.push_str(&format_f64(*v));
        }
        write!(s, "],\"split\":\"{}\"}}", self.split).unwrap();
        s
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Parse(format!("dataset record: {e}")))
    }

    pub fn from_parts(
        grid: &AmplitudeGrid,
        tau: f64,
        c0: f64,
        cbar: &MandelMatrix,
        split: Split,
    ) -> Self {
        let (m1, m2) = grid.modes();
        DatasetRecord {
            m1,
            m2,
            a: grid.data().to_vec(),
            tau,
            c0,
            cbar: TRIU.iter().map(|&(i, j)| cbar.get(i, j)).collect(),
            split: match split {
                Split::Train => "train".into(),
                Split::Val => "val".into(),
            },
        }
    }
}

pub fn write_records(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<DatasetRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(DatasetRecord::from_json_line)
        .collect()
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub phases: [f64; 4],
    pub resolution: usize,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
    pub n_tau: usize,
    pub filter: [f64; 2],
    pub split_fractions: [f64; 2],
    pub mode_sets: Vec<[usize; 2]>,
    pub n_amplitudes: usize,
    pub generated: usize,
    pub retained: usize,
    pub solver_failures: usize,
    pub invariant_failures: usize,
    pub records_file: String,
}

#[derive(Debug, Clone)]
pub struct DatasetParams {
    pub mode_sets: Vec<(usize, usize)>,
    pub n_amplitudes: usize,
    pub n_tau: usize,
    pub filter: [f64; 2],
    pub seed: u64,
    pub resolution: usize,
    pub phases: (IsotropicPhase, IsotropicPhase),
    pub solver: SolverConfig,
}

pub struct BuiltDataset {
    pub records: Vec<DatasetRecord>,
    pub manifest: DatasetManifest,
}

/// Generates, filters, homogenizes and labels the dataset. All randomness is
/// drawn up front; solves run in parallel; output order and the 80/20 split
/// per mode set depend only on the seed.
pub fn build_dataset(p: &DatasetParams) -> Result<BuiltDataset> {
    if p.n_tau == 0 || p.n_amplitudes == 0 || p.mode_sets.is_empty() {
        return Err(Error::InvalidArgument("dataset build needs modes, amplitudes, taus".into()));
    }
    if !(p.filter[0] < p.filter[1] && p.filter[0] >= 0.0 && p.filter[1] <= 1.0) {
        return Err(Error::InvalidArgument(format!("bad retention filter {:?}", p.filter)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let taus = equispaced_taus(p.n_tau);
    // sample all amplitude matrices sequentially so the draw is
    // schedule-independent
    let mut jobs = Vec::new();
    for (mode_idx, &(m1, m2)) in p.mode_sets.iter().enumerate() {
        for amp_idx in 0..p.n_amplitudes {
            let grid = AmplitudeGrid::sample(&mut rng, m1, m2)?;
            jobs.push((mode_idx, amp_idx, grid));
        }
    }
    let generated = jobs.len() * p.n_tau;

    struct RowOut {
        mode_idx: usize,
        amp_idx: usize,
        tau_idx: usize,
        grid: AmplitudeGrid,
        tau: f64,
        c0: f64,
        outcome: std::result::Result<MandelMatrix, String>,
    }

    let rows: Vec<RowOut> = jobs
        .par_iter()
        .flat_map_iter(|(mode_idx, amp_idx, grid)| {
            // render once per amplitude matrix, threshold per tau
            let spec = crate::microgen::MicroSpec::new(grid, 0.5, crate::microgen::T_PRODUCTION)
                .expect("tau 0.5 is valid");
            let f = range_normalize(
                &field(&spec, p.resolution, p.resolution).expect("resolution validated"),
            );
            taus.iter()
                .enumerate()
                .filter_map(|(tau_idx, &tau)| {
                    let img = threshold_hard(&f, tau).expect("normalized field");
                    let c0 = img.c0();
                    if c0 < p.filter[0] || c0 > p.filter[1] {
                        return None; // trivial geometry, filtered
                    }
                    let outcome = homogenize(&img, (&p.phases.0, &p.phases.1), &p.solver)
                        .map(|h| h.cbar)
                        .map_err(|e| e.to_string());
                    Some(RowOut {
                        mode_idx: *mode_idx,
                        amp_idx: *amp_idx,
                        tau_idx,
                        grid: grid.clone(),
                        tau,
                        c0,
                        outcome,
                    })
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let mut rows = rows;
    rows.sort_by_key(|r| (r.mode_idx, r.amp_idx, r.tau_idx));

    let stiff = plane_strain_stiffness(&p.phases.0);
    let soft = plane_strain_stiffness(&p.phases.1);
    let mut solver_failures = 0usize;
    let mut invariant_failures = 0usize;
    let mut kept: Vec<(usize, DatasetRecord)> = Vec::new();
    for row in rows {
        match row.outcome {
            Ok(cbar) => {
                let pair = PhasePair::new(stiff.clone(), soft.clone(), row.c0)?;
                let ok = cbar.is_spd(0.0) && inside_envelope(&cbar, &pair, 1e-6)?;
                if ok {
                    kept.push((
                        row.mode_idx,
                        DatasetRecord::from_parts(&row.grid, row.tau, row.c0, &cbar, Split::Train),
                    ));
                } else {
                    invariant_failures += 1;
                }
            }
            Err(_) => solver_failures += 1,
        }
    }

    // stratified 80/20 split per mode set, seeded independently of solves
    for mode_idx in 0..p.mode_sets.len() {
        let idxs: Vec<usize> = kept
            .iter()
            .enumerate()
            .filter(|(_, (m, _))| *m == mode_idx)
            .map(|(i, _)| i)
            .collect();
        let mut order = idxs.clone();
        let mut split_rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0xdead ^ mode_idx as u64);
        order.shuffle(&mut split_rng);
        let n_train = (order.len() as f64 * 0.8).round() as usize;
        for &i in order.iter().skip(n_train) {
            kept[i].1.split = "val".into();
        }
    }

    let records: Vec<DatasetRecord> = kept.into_iter().map(|(_, r)| r).collect();
    let manifest = DatasetManifest {
        seed: p.seed,
        phases: [
            p.phases.0.young(),
            p.phases.0.poisson(),
            p.phases.1.young(),
            p.phases.1.poisson(),
        ],
        resolution: p.resolution,
        solver_tol: p.solver.tol,
        solver_max_iter: p.solver.max_iter,
        n_tau: p.n_tau,
        filter: p.filter,
        split_fractions: [0.8, 0.2],
        mode_sets: p.mode_sets.iter().map(|&(a, b)| [a, b]).collect(),
        n_amplitudes: p.n_amplitudes,
        generated,
        retained: records.len(),
        solver_failures,
        invariant_failures,
        records_file: "records.jsonl".into(),
    };
    Ok(BuiltDataset { records, manifest })
}

pub fn write_dataset(dir: &Path, built: &BuiltDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_records(&dir.join(&built.manifest.records_file), &built.records)?;
    let json = serde_json::to_string_pretty(&built.manifest)
        .map_err(|e| Error::Parse(format!("manifest encode: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("manifest: {e}")))
}
