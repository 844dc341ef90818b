//! Exact failure mass on a discretized 2-D signature space.
//!
//! A density is a grid of nonnegative cell values with a uniform cell measure;
//! its mass is the plain Riemann sum. An edit kernel is an additive change
//! field clipped at zero. Because everything is a finite sum, the mass-bound
//! inequality `M' <= M - delta + eps` can be checked exactly for any kernel.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Reductions at or below this count as no progress.
pub const STATIONARY_TOL: f64 = 1e-9;
/// Slack allowed by the mass-bound check for floating-point summation.
pub const CHECK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("unknown region {0}")]
    UnknownRegion(usize),
    #[error("grid mismatch: expected {expected} cells, got {found}")]
    GridMismatch { expected: usize, found: usize },
    #[error("density values must be finite and nonnegative")]
    InvalidValue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDensity {
    pub nx: usize,
    pub ny: usize,
    pub cell_measure: f64,
    /// Row-major, `values[y * nx + x]`.
    pub values: Vec<f64>,
    /// Region label of each cell; labels are `0..region_count`.
    pub regions: Vec<usize>,
    pub region_count: usize,
}

impl DiscreteDensity {
    /// Zero density on an `nx × ny` grid over the unit square, one region.
    pub fn zeros(nx: usize, ny: usize) -> Self {
        DiscreteDensity {
            nx,
            ny,
            cell_measure: 1.0 / (nx * ny) as f64,
            values: vec![0.0; nx * ny],
            regions: vec![0; nx * ny],
            region_count: 1,
        }
    }

    pub fn new(
        nx: usize,
        ny: usize,
        cell_measure: f64,
        values: Vec<f64>,
        regions: Vec<usize>,
    ) -> Result<Self, OracleError> {
        let cells = nx * ny;
        for len in [values.len(), regions.len()] {
            if len != cells {
                return Err(OracleError::GridMismatch {
                    expected: cells,
                    found: len,
                });
            }
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(OracleError::InvalidValue);
        }
        let region_count = regions.iter().max().map_or(0, |m| m + 1);
        Ok(DiscreteDensity {
            nx,
            ny,
            cell_measure,
            values,
            regions,
            region_count,
        })
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Cell center in the unit square.
    pub fn center(&self, cell: usize) -> (f64, f64) {
        let (x, y) = (cell % self.nx, cell / self.nx);
        ((x as f64 + 0.5) / self.nx as f64, (y as f64 + 0.5) / self.ny as f64)
    }

    /// Replaces the region labels with a `gx × gy` block partition.
    pub fn with_block_regions(mut self, gx: usize, gy: usize) -> Self {
        for cell in 0..self.cells() {
            let (x, y) = (cell % self.nx, cell / self.nx);
            self.regions[cell] = (y * gy / self.ny) * gx + x * gx / self.nx;
        }
        self.region_count = gx * gy;
        self
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y,value,region\n");
        for cell in 0..self.cells() {
            let (x, y) = self.center(cell);
            let _ = writeln!(out, "{x},{y},{},{}", self.values[cell], self.regions[cell]);
        }
        out
    }
}

/// `Σ value · μ_cell` in cell order.
pub fn total_mass(rho: &DiscreteDensity) -> f64 {
    rho.values.iter().map(|v| v * rho.cell_measure).sum()
}

pub fn region_mass(rho: &DiscreteDensity, region: usize) -> Result<f64, OracleError> {
    if region >= rho.region_count {
        return Err(OracleError::UnknownRegion(region));
    }
    Ok(rho
        .values
        .iter()
        .zip(&rho.regions)
        .filter(|(_, &r)| r == region)
        .map(|(v, _)| v * rho.cell_measure)
        .sum())
}

/// What a kernel claims about itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Mass removed from the target region.
    pub delta: f64,
    /// Largest pointwise change.
    pub bound: f64,
    /// Chebyshev radius (in cells) of changes outside the target region.
    pub radius: usize,
}

/// An additive change field, clipped at zero when applied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditKernel {
    pub name: String,
    pub change: Vec<f64>,
    pub target: Option<usize>,
    pub declared: KernelParams,
}

/// Parameters measured on an actual application.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RealizedParams {
    /// Reduction of the target region's mass (0 without a target).
    pub delta: f64,
    pub bound: f64,
    pub radius: usize,
    /// `Σ |change| · μ` over cells outside the target region.
    pub spillover: f64,
    /// Largest finite-difference slope of the realized change field.
    pub lipschitz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Applied {
    pub density: DiscreteDensity,
    pub realized: RealizedParams,
}

impl EditKernel {
    pub fn identity(cells: usize) -> Self {
        EditKernel {
            name: "identity".into(),
            change: vec![0.0; cells],
            target: None,
            declared: KernelParams::default(),
        }
    }

    /// Removes `amount` of mass from `region` by scaling its cells down uniformly.
    pub fn remove_mass(rho: &DiscreteDensity, region: usize, amount: f64) -> Result<Self, OracleError> {
        let m = region_mass(rho, region)?;
        let frac = if m > 0.0 { (amount / m).min(1.0) } else { 0.0 };
        let change: Vec<f64> = rho
            .values
            .iter()
            .zip(&rho.regions)
            .map(|(v, &r)| if r == region { -frac * v } else { 0.0 })
            .collect();
        let bound = change.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        Ok(EditKernel {
            name: format!("remove_{region}"),
            change,
            target: Some(region),
            declared: KernelParams {
                delta: frac * m,
                bound,
                radius: 0,
            },
        })
    }

    /// Adds `amount` of mass spread evenly over non-target cells within
    /// Chebyshev distance `radius` of the target region.
    pub fn with_spillover(mut self, rho: &DiscreteDensity, radius: usize, amount: f64) -> Self {
        let Some(target) = self.target else {
            return self;
        };
        let dist = distance_to_region(rho, target);
        let band: Vec<usize> = (0..rho.cells())
            .filter(|&c| rho.regions[c] != target && dist[c] <= radius)
            .collect();
        if band.is_empty() {
            return self;
        }
        let per_cell = amount / (band.len() as f64 * rho.cell_measure);
        for c in band {
            self.change[c] += per_cell;
        }
        self.declared.radius = radius;
        self.declared.bound = self.change.iter().fold(0.0f64, |a, c| a.max(c.abs()));
        self.name = format!("{}_spill{radius}", self.name);
        self
    }
}

/// Chebyshev distance in cells from every cell to the nearest cell of `region`
/// (`usize::MAX` if the region is empty).
pub fn distance_to_region(rho: &DiscreteDensity, region: usize) -> Vec<usize> {
    let mut dist = vec![usize::MAX; rho.cells()];
    let mut queue = VecDeque::new();
    for c in 0..rho.cells() {
        if rho.regions[c] == region {
            dist[c] = 0;
            queue.push_back(c);
        }
    }
    let (nx, ny) = (rho.nx as isize, rho.ny as isize);
    while let Some(c) = queue.pop_front() {
        let (x, y) = ((c % rho.nx) as isize, (c / rho.nx) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (px, py) = (x + dx, y + dy);
                if (dx, dy) == (0, 0) || px < 0 || py < 0 || px >= nx || py >= ny {
                    continue;
                }
                let p = (py * nx + px) as usize;
                if dist[p] == usize::MAX {
                    dist[p] = dist[c] + 1;
                    queue.push_back(p);
                }
            }
        }
    }
    dist
}

/// Applies the kernel (clipping at zero) and measures what it actually did.
pub fn apply_kernel(rho: &DiscreteDensity, kernel: &EditKernel) -> Result<Applied, OracleError> {
    if kernel.change.len() != rho.cells() {
        return Err(OracleError::GridMismatch {
            expected: rho.cells(),
            found: kernel.change.len(),
        });
    }
    let mut out = rho.clone();
    for (v, c) in out.values.iter_mut().zip(&kernel.change) {
        *v = (*v + c).max(0.0);
    }
    let realized_change: Vec<f64> = out.values.iter().zip(&rho.values).map(|(a, b)| a - b).collect();
    let bound = realized_change.iter().fold(0.0f64, |a, c| a.max(c.abs()));
    let (delta, radius, spillover) = match kernel.target {
        Some(t) => {
            let delta = region_mass(rho, t)? - region_mass(&out, t)?;
            let dist = distance_to_region(rho, t);
            let mut radius = 0;
            let mut spill = 0.0;
            for c in 0..rho.cells() {
                if rho.regions[c] != t && realized_change[c] != 0.0 {
                    radius = radius.max(dist[c]);
                    spill += realized_change[c].abs() * rho.cell_measure;
                }
            }
            (delta, radius, spill)
        }
        None => {
            let spill = realized_change.iter().map(|c| c.abs() * rho.cell_measure).sum();
            (0.0, 0, spill)
        }
    };
    let h = 1.0 / rho.nx.max(rho.ny) as f64;
    let mut lipschitz: f64 = 0.0;
    for c in 0..rho.cells() {
        let (x, y) = (c % rho.nx, c / rho.nx);
        if x + 1 < rho.nx {
            lipschitz = lipschitz.max((realized_change[c + 1] - realized_change[c]).abs() / h);
        }
        if y + 1 < rho.ny {
            lipschitz = lipschitz.max((realized_change[c + rho.nx] - realized_change[c]).abs() / h);
        }
    }
    Ok(Applied {
        density: out,
        realized: RealizedParams {
            delta,
            bound,
            radius,
            spillover,
            lipschitz,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// False when the target region lost less than `delta`; the bound then
    /// does not apply and `holds` is not meaningful.
    pub applicable: bool,
    pub holds: bool,
    /// `(M_before - delta + eps) - M_after`; nonnegative when the bound holds.
    pub slack: f64,
    /// Positive mass added outside the target region.
    pub eps_realized: f64,
    pub mass_before: f64,
    pub mass_after: f64,
}

/// Checks `M(after) <= M(before) - delta + eps`, with `eps` the realized
/// positive spillover outside `target`.
pub fn check_mass_bound(
    before: &DiscreteDensity,
    after: &DiscreteDensity,
    target: usize,
    delta: f64,
) -> Result<BoundCheck, OracleError> {
    let reduction = region_mass(before, target)? - region_mass(after, target)?;
    let eps: f64 = before
        .values
        .iter()
        .zip(&after.values)
        .zip(&before.regions)
        .filter(|(_, &r)| r != target)
        .map(|((b, a), _)| (a - b).max(0.0) * before.cell_measure)
        .sum();
    let mass_before = total_mass(before);
    let mass_after = total_mass(after);
    let slack = mass_before - delta + eps - mass_after;
    Ok(BoundCheck {
        applicable: reduction >= delta - CHECK_TOL,
        holds: slack >= -CHECK_TOL,
        slack,
        eps_realized: eps,
        mass_before,
        mass_after,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Descent {
    /// Mass before the first round, then after each applied kernel.
    pub trajectory: Vec<f64>,
    /// Menu index applied in each round.
    pub chosen: Vec<usize>,
    /// Rounds evaluated, including a final one that found no improvement.
    pub rounds_evaluated: usize,
    pub stationary: bool,
}

impl Descent {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,mass,chosen\n");
        for (i, m) in self.trajectory.iter().enumerate() {
            let chosen = if i == 0 { String::new() } else { self.chosen[i - 1].to_string() };
            let _ = writeln!(out, "{i},{m},{chosen}");
        }
        out
    }
}

/// Greedy exact descent: each round applies the menu kernel with the lowest
/// resulting mass (lowest index on ties) and stops once no kernel reduces the
/// mass by more than [`STATIONARY_TOL`].
pub fn greedy_kernel_descent(
    rho0: &DiscreteDensity,
    menu: &[EditKernel],
    max_rounds: usize,
) -> Result<Descent, OracleError> {
    let mut rho = rho0.clone();
    let mut m = total_mass(&rho);
    let mut out = Descent {
        trajectory: vec![m],
        chosen: Vec::new(),
        rounds_evaluated: 0,
        stationary: false,
    };
    for _ in 0..max_rounds {
        out.rounds_evaluated += 1;
        let mut best: Option<(usize, f64, DiscreteDensity)> = None;
        for (i, k) in menu.iter().enumerate() {
            let applied = apply_kernel(&rho, k)?;
            let mk = total_mass(&applied.density);
            if best.as_ref().is_none_or(|(_, bm, _)| mk < *bm) {
                best = Some((i, mk, applied.density));
            }
        }
        match best {
            Some((i, mk, next)) if m - mk > STATIONARY_TOL => {
                rho = next;
                m = mk;
                out.trajectory.push(m);
                out.chosen.push(i);
            }
            _ => {
                out.stationary = true;
                break;
            }
        }
    }
    Ok(out)
}

/// A random density on an `n × n` grid with a `g × g` block partition.
pub fn random_density(n: usize, g: usize, seed: u64) -> DiscreteDensity {
    let mut rng = seed::rng(seed);
    let mut rho = DiscreteDensity::zeros(n, n).with_block_regions(g, g);
    for v in &mut rho.values {
        *v = rng.gen::<f64>();
    }
    rho
}

/// A random density on a 2 × 2 block partition whose first regions carry
/// exactly `masses` (the last region takes what is left of a unit total), and
/// one kernel per planted region that clears it.
pub fn planted_modes(n: usize, masses: &[f64], seed: u64) -> (DiscreteDensity, Vec<EditKernel>) {
    assert!(masses.len() < 4, "at most three planted regions");
    let rest = 1.0 - masses.iter().sum::<f64>();
    assert!(rest > 0.0, "planted masses must sum to less than 1");
    let mut rho = random_density(n, 2, seed);
    for r in 0..4 {
        let want = masses.get(r).copied().unwrap_or(if r == 3 { rest } else { 0.0 });
        let have = region_mass(&rho, r).expect("block region");
        for (v, &reg) in rho.values.iter_mut().zip(&rho.regions) {
            if reg == r {
                *v *= want / have;
            }
        }
    }
    let kernels = (0..masses.len())
        .map(|r| {
            let m = region_mass(&rho, r).expect("block region");
            EditKernel::remove_mass(&rho, r, m).expect("block region")
        })
        .collect();
    (rho, kernels)
}

/// A random kernel satisfying the bound's hypothesis: it removes a random
/// fraction of a random region's mass, may spill a smaller amount into a
/// random band around it, and may lower some unrelated cells.
pub fn random_kernel(rho: &DiscreteDensity, seed: u64) -> EditKernel {
    let mut rng = seed::rng(seed);
    let target = rng.gen_range(0..rho.region_count);
    let m = region_mass(rho, target).unwrap_or(0.0);
    let amount = m * rng.gen_range(0.05..0.95);
    let mut k = EditKernel::remove_mass(rho, target, amount).expect("region exists");
    if rng.gen_bool(0.7) {
        let radius = rng.gen_range(1..8);
        k = k.with_spillover(rho, radius, amount * rng.gen_range(0.0..0.5));
    }
    if rng.gen_bool(0.5) {
        for _ in 0..rng.gen_range(1..20) {
            let c = rng.gen_range(0..rho.cells());
            if rho.regions[c] != target {
                k.change[c] -= rng.gen::<f64>();
            }
        }
    }
    k.name = format!("random_{seed}");
    k
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kernel: String,
    pub target: usize,
    pub delta: f64,
    pub check: BoundCheck,
    pub realized: RealizedParams,
}

/// Checks the mass bound on `count` random kernels over one random density.
pub fn mass_bound_sweep(n: usize, count: usize, seed: u64) -> Vec<SweepResult> {
    let rho = random_density(n, 4, seed::derive(seed, "density"));
    (0..count)
        .map(|i| {
            let k = random_kernel(&rho, seed::derive_index(seed, i as u64));
            let target = k.target.expect("random kernels have a target");
            let applied = apply_kernel(&rho, &k).expect("same grid");
            let delta = applied.realized.delta;
            let check = check_mass_bound(&rho, &applied.density, target, delta).expect("region exists");
            SweepResult {
                kernel: k.name,
                target,
                delta,
                check,
                realized: applied.realized,
            }
        })
        .collect()
}
