//! Synthetic datasets with a planted two-level class hierarchy, standing in
//! for backbone features at desk scale.
//!
//! Everything lives on the unit sphere because every similarity downstream is
//! cosine. Coarse classes sit on mutually orthogonal directions (optionally
//! tilted toward a common axis to reduce their separation angle); each fine
//! class perturbs its coarse center by a fixed orthogonal offset; samples add
//! Gaussian noise and renormalize.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::hierarchy::FeatureBatch;
use crate::linalg::{cosine_sim, DenseMatrix, LinalgError};

/// Offset magnitude between a fine center and its coarse center. With
/// `fine_per_coarse = 2` the same-coarse fine-fine cosine is
/// `(1 - delta^2) / (1 + delta^2) ~ 0.835`.
const FINE_OFFSET: f64 = 0.3;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid dataset config: {0}")]
    InvalidConfig(String),
    #[error("generation self-check failed: {0}")]
    GenerationCheck(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Generator parameters. `dim` must be at least the total fine-class count
/// (plus one when the coarse separation angle is below 90 degrees), or the
/// orthogonal construction is impossible.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticParams {
    pub n_coarse: usize,
    pub fine_per_coarse: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub coarse_angle_deg: f64,
    pub images: usize,
    pub per_class: usize,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n_coarse: 3,
            fine_per_coarse: 2,
            dim: 32,
            noise_sigma: 0.05,
            coarse_angle_deg: 90.0,
            images: 4,
            per_class: 16,
        }
    }
}

impl SyntheticParams {
    pub fn n_fine(&self) -> usize {
        self.n_coarse * self.fine_per_coarse
    }

    pub fn locations_per_image(&self) -> usize {
        self.n_fine() * self.per_class
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.n_coarse < 1 || self.fine_per_coarse < 1 || self.images < 1 || self.per_class < 1 {
            return Err(SynthError::InvalidConfig(
                "counts (classes, images, samples per class) must be >= 1".into(),
            ));
        }
        if self.noise_sigma < 0.0 {
            return Err(SynthError::InvalidConfig(format!(
                "noise sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.dim < self.n_fine() {
            return Err(SynthError::InvalidConfig(format!(
                "dim {} < {} fine classes; orthogonal construction impossible",
                self.dim,
                self.n_fine()
            )));
        }
        if !(self.coarse_angle_deg > 0.0 && self.coarse_angle_deg <= 90.0) {
            return Err(SynthError::InvalidConfig(format!(
                "coarse separation angle must be in (0, 90] degrees, got {}",
                self.coarse_angle_deg
            )));
        }
        if self.coarse_angle_deg < 90.0 && self.dim < self.n_fine() + 1 {
            return Err(SynthError::InvalidConfig(
                "tilted coarse centers need one extra dimension".into(),
            ));
        }
        Ok(())
    }
}

/// One generated dataset: per-image encoder features plus per-location class
/// labels at both planted levels. Immutable after creation.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub batches: Vec<FeatureBatch>,
    pub coarse_labels: Vec<Vec<usize>>,
    pub fine_labels: Vec<Vec<usize>>,
    pub params: SyntheticParams,
    pub seed: u64,
    pub coarse_centers: DenseMatrix,
    pub fine_centers: DenseMatrix,
}

impl SyntheticDataset {
    pub fn n_coarse(&self) -> usize {
        self.params.n_coarse
    }

    pub fn n_fine(&self) -> usize {
        self.params.n_fine()
    }

    pub fn total_locations(&self) -> usize {
        self.batches.iter().map(FeatureBatch::locations).sum()
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Random orthonormal vectors via Gram-Schmidt on Gaussian draws.
fn orthonormal_basis(
    count: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>, SynthError> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0;
    while basis.len() < count {
        attempts += 1;
        if attempts > 64 * count {
            return Err(SynthError::InvalidConfig(format!(
                "cannot build {count} orthonormal vectors in dimension {dim}"
            )));
        }
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        if normalize(&mut v) > 1e-6 {
            basis.push(v);
        }
    }
    Ok(basis)
}

/// Deterministically generates a dataset from `params` and `seed`.
pub fn generate(params: &SyntheticParams, seed: u64) -> Result<SyntheticDataset, SynthError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_fine = params.n_fine();
    let fpc = params.fine_per_coarse;
    let tilted = params.coarse_angle_deg < 90.0;
    let basis = orthonormal_basis(n_fine + usize::from(tilted), params.dim, &mut rng)?;
    let tilt_axis = tilted.then(|| basis[n_fine].clone());

    // Coarse center j = mean of its group's basis vectors, optionally tilted
    // toward the shared axis so pairwise cosines equal cos(angle).
    let target_cos = params.coarse_angle_deg.to_radians().cos();
    let tilt = target_cos.max(0.0).sqrt().asin();
    let mut coarse = DenseMatrix::zeros(params.n_coarse, params.dim);
    for j in 0..params.n_coarse {
        let mut c = vec![0.0; params.dim];
        for f in 0..fpc {
            for (x, y) in c.iter_mut().zip(&basis[j * fpc + f]) {
                *x += y;
            }
        }
        normalize(&mut c);
        if let Some(w) = &tilt_axis {
            for (x, y) in c.iter_mut().zip(w) {
                *x = tilt.cos() * *x + tilt.sin() * y;
            }
        }
        coarse.row_mut(j).copy_from_slice(&c);
    }

    // Fine center (j, f) = coarse center plus a fixed offset along the part
    // of basis vector (j, f) orthogonal to the coarse direction. A group of
    // one has nothing to split: its fine center is the coarse center.
    let mut fine = DenseMatrix::zeros(n_fine, params.dim);
    for j in 0..params.n_coarse {
        let c = coarse.row(j).to_vec();
        for f in 0..fpc {
            let idx = j * fpc + f;
            if fpc == 1 {
                fine.row_mut(idx).copy_from_slice(&c);
                continue;
            }
            let e = &basis[idx];
            let dot: f64 = e.iter().zip(&c).map(|(x, y)| x * y).sum();
            let mut u: Vec<f64> = e.iter().zip(&c).map(|(x, y)| x - dot * y).collect();
            if normalize(&mut u) < 1e-9 {
                return Err(SynthError::GenerationCheck(format!(
                    "degenerate offset direction for fine class ({j}, {f})"
                )));
            }
            let row = fine.row_mut(idx);
            for d in 0..params.dim {
                row[d] = c[d] + FINE_OFFSET * u[d];
            }
            normalize(fine.row_mut(idx));
        }
    }

    check_construction(params, &coarse, &fine, target_cos)?;

    let mut batches = Vec::with_capacity(params.images);
    let mut coarse_labels = Vec::with_capacity(params.images);
    let mut fine_labels = Vec::with_capacity(params.images);
    for _ in 0..params.images {
        let p = params.locations_per_image();
        let mut features = DenseMatrix::zeros(p, params.dim);
        let mut coarse_l = Vec::with_capacity(p);
        let mut fine_l = Vec::with_capacity(p);
        let mut loc = 0;
        for class in 0..n_fine {
            for _ in 0..params.per_class {
                let row = features.row_mut(loc);
                for (d, x) in row.iter_mut().enumerate() {
                    let noise: f64 = if params.noise_sigma > 0.0 {
                        let g: f64 = rng.sample(rand_distr::StandardNormal);
                        params.noise_sigma * g
                    } else {
                        0.0
                    };
                    *x = fine.get(class, d) + noise;
                }
                if normalize(features.row_mut(loc)) < 1e-9 {
                    return Err(SynthError::GenerationCheck(format!(
                        "sample at location {loc} collapsed to zero"
                    )));
                }
                coarse_l.push(class / fpc);
                fine_l.push(class);
                loc += 1;
            }
        }
        batches.push(FeatureBatch::from_encoder(features));
        coarse_labels.push(coarse_l);
        fine_labels.push(fine_l);
    }

    Ok(SyntheticDataset {
        batches,
        coarse_labels,
        fine_labels,
        params: params.clone(),
        seed,
        coarse_centers: coarse,
        fine_centers: fine,
    })
}

/// Construction self-check, run at generation time: coarse pairwise cosines
/// must equal the configured separation, and fine centers must stay tight
/// around their coarse parent.
fn check_construction(
    params: &SyntheticParams,
    coarse: &DenseMatrix,
    fine: &DenseMatrix,
    target_cos: f64,
) -> Result<(), SynthError> {
    if params.n_coarse > 1 {
        let sims = cosine_sim(coarse, coarse)?;
        for i in 0..params.n_coarse {
            for j in 0..params.n_coarse {
                if i != j && (sims.get(i, j) - target_cos).abs() > 1e-9 {
                    return Err(SynthError::GenerationCheck(format!(
                        "coarse centers {i},{j} have cosine {} (expected {target_cos})",
                        sims.get(i, j)
                    )));
                }
            }
        }
    }
    let fpc = params.fine_per_coarse;
    if fpc > 1 {
        let sims = cosine_sim(fine, fine)?;
        // Same-coarse fine centers share the coarse component; their cosine is
        // (1 + offset^2 * u_f . u_g) / (1 + offset^2) where the normalized
        // offset directions satisfy u_f . u_g = -p^2 / (1 - p^2) with
        // p^2 = cos^2(tilt) / fpc. Untilted this reduces to -1 / (fpc - 1).
        let p2 = (1.0 - target_cos.max(0.0)) / fpc as f64;
        let uu = -p2 / (1.0 - p2);
        let d2 = FINE_OFFSET * FINE_OFFSET;
        let expected = (1.0 + d2 * uu) / (1.0 + d2);
        for j in 0..params.n_coarse {
            for f in 0..fpc {
                for g in f + 1..fpc {
                    let s = sims.get(j * fpc + f, j * fpc + g);
                    if (s - expected).abs() > 1e-9 {
                        return Err(SynthError::GenerationCheck(format!(
                            "fine centers ({j},{f}) and ({j},{g}) have cosine {s}, expected {expected}"
                        )));
                    }
                }
            }
        }
    }
    Ok(())
}

impl SyntheticDataset {
    /// Writes the dataset as matrix CSVs plus a labels CSV and a key=value
    /// parameter file.
    pub fn dump(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir)?;
        for (i, batch) in self.batches.iter().enumerate() {
            batch.encoder.write_csv(&dir.join(format!("features_{i}.csv")))?;
        }
        self.coarse_centers.write_csv(&dir.join("coarse_centers.csv"))?;
        self.fine_centers.write_csv(&dir.join("fine_centers.csv"))?;
        let mut labels = String::from("batch,location,coarse,fine\n");
        for (b, (cl, fl)) in self.coarse_labels.iter().zip(&self.fine_labels).enumerate() {
            for (loc, (c, f)) in cl.iter().zip(fl).enumerate() {
                labels.push_str(&format!("{b},{loc},{c},{f}\n"));
            }
        }
        fs::write(dir.join("labels.csv"), labels)?;
        let p = &self.params;
        let params = format!(
            "n_coarse = {}\nfine_per_coarse = {}\ndim = {}\nnoise_sigma = {:?}\n\
             coarse_angle_deg = {:?}\nimages = {}\nper_class = {}\nseed = {}\n",
            p.n_coarse, p.fine_per_coarse, p.dim, p.noise_sigma, p.coarse_angle_deg, p.images,
            p.per_class, self.seed
        );
        fs::write(dir.join("params.txt"), params)?;
        Ok(())
    }

    /// Reloads a dumped dataset by regenerating it from the stored parameters
    /// and verifying the stored feature matrices match bit for bit.
    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(dir.join("params.txt"))?;
        let mut params = SyntheticParams::default();
        let mut seed = 0u64;
        for line in text.lines() {
            let Some((key, value)) = line.split_once('=') else { continue };
            let (key, value) = (key.trim(), value.trim());
            let parse_err =
                |k: &str| SynthError::InvalidConfig(format!("bad value for {k} in params.txt"));
            match key {
                "n_coarse" => params.n_coarse = value.parse().map_err(|_| parse_err(key))?,
                "fine_per_coarse" => {
                    params.fine_per_coarse = value.parse().map_err(|_| parse_err(key))?
                }
                "dim" => params.dim = value.parse().map_err(|_| parse_err(key))?,
                "noise_sigma" => params.noise_sigma = value.parse().map_err(|_| parse_err(key))?,
                "coarse_angle_deg" => {
                    params.coarse_angle_deg = value.parse().map_err(|_| parse_err(key))?
                }
                "images" => params.images = value.parse().map_err(|_| parse_err(key))?,
                "per_class" => params.per_class = value.parse().map_err(|_| parse_err(key))?,
                "seed" => seed = value.parse().map_err(|_| parse_err(key))?,
                other => {
                    return Err(SynthError::InvalidConfig(format!(
                        "unknown key {other} in params.txt"
                    )))
                }
            }
        }
        let dataset = generate(&params, seed)?;
        for (i, batch) in dataset.batches.iter().enumerate() {
            let stored = DenseMatrix::read_csv(&dir.join(format!("features_{i}.csv")))?;
            if stored != batch.encoder {
                return Err(SynthError::GenerationCheck(format!(
                    "stored features_{i}.csv does not match regeneration"
                )));
            }
        }
        Ok(dataset)
    }
}
