//! The linear mixed model `y = Xτ + Zu + e` and its parameterized variance
//! structures.
//!
//! `var(y) = V(θ) = σ²(R(φ) + Z G Zᵀ) = σ² H(κ)` with `θ = (σ²; γ; φ)`.
//! How the random-effect parameters enter `G` is set by [`Parameterization`]:
//!
//! * `Ratio`: `G = G(γ)` holds variance ratios, so `V = σ²(R + Z G(γ) Zᵀ)`.
//! * `Components`: the parameters are absolute variance components `s`,
//!   `V = σ² R + Z G̃(s) Zᵀ`, and the scale-free `G = G̃(s) / σ²`. With a
//!   parameter-free `R` and linear `G̃` this makes `V` linear in `θ`.

use serde::{Deserialize, Serialize};

use crate::error::{RemlError, Result};
use crate::linalg::{
    self, spd_inverse, spd_logdet, symmetrize, CscMatrix, DenseMatrix, Vector,
};

/// Default admissible bound for an AR(1) correlation.
pub const AR1_BOUND: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    #[default]
    Ratio,
    Components,
}

/// User-supplied linear structure `base + Σ θ_k M_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitStructure {
    pub base: Option<DenseMatrix>,
    pub components: Vec<DenseMatrix>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub initial: Vec<f64>,
}

impl ExplicitStructure {
    /// A fixed, parameter-free matrix.
    pub fn fixed(m: DenseMatrix) -> Self {
        Self {
            base: Some(m),
            components: Vec::new(),
            lower: Vec::new(),
            upper: Vec::new(),
            initial: Vec::new(),
        }
    }

    /// `θ · M` with `θ ≥ 0`, the usual single-kernel random effect.
    pub fn scaled(m: DenseMatrix) -> Self {
        Self {
            base: None,
            components: vec![m],
            lower: vec![0.0],
            upper: vec![f64::INFINITY],
            initial: vec![1.0],
        }
    }

    fn dim(&self) -> usize {
        self.base
            .as_ref()
            .or(self.components.first())
            .map_or(0, DenseMatrix::nrows)
    }
}

/// A parameterized symmetric matrix (`G` over `γ` or `R` over `φ`).
#[derive(Debug, Clone, PartialEq)]
pub enum VarianceStructure {
    /// `I_dim`, no parameters.
    Identity { dim: usize },
    /// `diag(θ_1 I_{b_1}, …, θ_r I_{b_r})`, one parameter per block, `θ_k ≥ 0`.
    IidBlocks { sizes: Vec<usize> },
    /// `R_ij = φ^{|i−j|}` with `|φ| ≤ bound`.
    Ar1 { dim: usize, bound: f64 },
    Explicit(ExplicitStructure),
}

impl VarianceStructure {
    pub fn ar1(dim: usize) -> Self {
        Self::Ar1 {
            dim,
            bound: AR1_BOUND,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Identity { .. } => "identity",
            Self::IidBlocks { .. } => "iid_blocks",
            Self::Ar1 { .. } => "ar1",
            Self::Explicit(_) => "explicit",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Identity { dim } | Self::Ar1 { dim, .. } => *dim,
            Self::IidBlocks { sizes } => sizes.iter().sum(),
            Self::Explicit(e) => e.dim(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Self::Identity { .. } => 0,
            Self::IidBlocks { sizes } => sizes.len(),
            Self::Ar1 { .. } => 1,
            Self::Explicit(e) => e.components.len(),
        }
    }

    /// Second derivatives vanish identically.
    pub fn is_linear(&self) -> bool {
        !matches!(self, Self::Ar1 { .. })
    }

    /// Admissible `[lower, upper]` for parameter `k`.
    pub fn bounds(&self, k: usize) -> (f64, f64) {
        match self {
            Self::Identity { .. } => unreachable!("identity has no parameters"),
            Self::IidBlocks { .. } => (0.0, f64::INFINITY),
            Self::Ar1 { bound, .. } => (-bound, *bound),
            Self::Explicit(e) => (e.lower[k], e.upper[k]),
        }
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(RemlError::DimensionMismatch(format!(
                "{} structure takes {} parameters, got {}",
                self.kind(),
                self.n_params(),
                params.len()
            )));
        }
        Ok(())
    }

    pub fn value(&self, params: &[f64]) -> Result<DenseMatrix> {
        self.check_params(params)?;
        let n = self.dim();
        Ok(match self {
            Self::Identity { .. } => DenseMatrix::identity(n, n),
            Self::IidBlocks { sizes } => {
                let diag: Vec<f64> = sizes
                    .iter()
                    .zip(params)
                    .flat_map(|(&b, &t)| std::iter::repeat_n(t, b))
                    .collect();
                DenseMatrix::from_diagonal(&Vector::from_vec(diag))
            }
            Self::Ar1 { .. } => {
                let phi = params[0];
                DenseMatrix::from_fn(n, n, |i, j| phi.powi(i.abs_diff(j) as i32))
            }
            Self::Explicit(e) => {
                let mut m = e.base.clone().unwrap_or_else(|| DenseMatrix::zeros(n, n));
                for (c, &t) in e.components.iter().zip(params) {
                    m += c * t;
                }
                m
            }
        })
    }

    /// `∂/∂θ_k` of [`value`](Self::value).
    pub fn first(&self, params: &[f64], k: usize) -> Result<DenseMatrix> {
        self.check_params(params)?;
        let n = self.dim();
        Ok(match self {
            Self::Identity { .. } => unreachable!("identity has no parameters"),
            Self::IidBlocks { sizes } => {
                let start: usize = sizes[..k].iter().sum();
                let mut m = DenseMatrix::zeros(n, n);
                for i in start..start + sizes[k] {
                    m[(i, i)] = 1.0;
                }
                m
            }
            Self::Ar1 { .. } => {
                let phi = params[0];
                DenseMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
                    0 => 0.0,
                    d => d as f64 * phi.powi(d as i32 - 1),
                })
            }
            Self::Explicit(e) => e.components[k].clone(),
        })
    }

    /// `∂²/∂θ_k∂θ_l`; `None` when identically zero.
    pub fn second(&self, params: &[f64], _k: usize, _l: usize) -> Result<Option<DenseMatrix>> {
        self.check_params(params)?;
        Ok(match self {
            Self::Ar1 { dim, .. } => {
                let phi = params[0];
                Some(DenseMatrix::from_fn(*dim, *dim, |i, j| match i.abs_diff(j) {
                    0 | 1 => 0.0,
                    d => (d * (d - 1)) as f64 * phi.powi(d as i32 - 2),
                }))
            }
            _ => None,
        })
    }

    /// Inverse in sparse form; closed forms for the built-in kinds.
    pub fn inverse(&self, params: &[f64]) -> Result<CscMatrix> {
        self.check_params(params)?;
        let n = self.dim();
        match self {
            Self::Identity { .. } => Ok(CscMatrix::identity(n)),
            Self::IidBlocks { sizes } => {
                let mut cols = Vec::with_capacity(n);
                for (k, (&b, &t)) in sizes.iter().zip(params).enumerate() {
                    if t <= 0.0 {
                        return Err(RemlError::NotPositiveDefinite(format!(
                            "variance parameter {k} of G is {t}"
                        )));
                    }
                    cols.extend(std::iter::repeat_n(1.0 / t, b));
                }
                let columns = cols.into_iter().enumerate().map(|(i, v)| vec![(i, v)]).collect();
                CscMatrix::from_columns(n, columns)
            }
            Self::Ar1 { .. } => {
                let phi = params[0];
                let c = 1.0 / (1.0 - phi * phi);
                if n == 1 {
                    return Ok(CscMatrix::identity(1));
                }
                let columns = (0..n)
                    .map(|j| {
                        let diag = if j == 0 || j == n - 1 { c } else { c * (1.0 + phi * phi) };
                        let mut col = Vec::with_capacity(3);
                        if j > 0 {
                            col.push((j - 1, -phi * c));
                        }
                        col.push((j, diag));
                        if j + 1 < n {
                            col.push((j + 1, -phi * c));
                        }
                        col
                    })
                    .collect();
                CscMatrix::from_columns(n, columns)
            }
            Self::Explicit(_) => Ok(CscMatrix::from_dense(&spd_inverse(&self.value(params)?)?)),
        }
    }

    pub fn logdet(&self, params: &[f64]) -> Result<f64> {
        self.check_params(params)?;
        match self {
            Self::Identity { .. } => Ok(0.0),
            Self::IidBlocks { sizes } => sizes
                .iter()
                .zip(params)
                .enumerate()
                .map(|(k, (&b, &t))| {
                    if t > 0.0 {
                        Ok(b as f64 * t.ln())
                    } else {
                        Err(RemlError::NotPositiveDefinite(format!(
                            "variance parameter {k} of G is {t}"
                        )))
                    }
                })
                .sum(),
            Self::Ar1 { dim, .. } => Ok((*dim as f64 - 1.0) * (1.0 - params[0] * params[0]).ln()),
            Self::Explicit(_) => spd_logdet(&self.value(params)?),
        }
    }
}

/// Random-effect design `Z = [Z_1, …, Z_r]`, stored sparsely.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomDesign {
    z: CscMatrix,
    block_sizes: Vec<usize>,
}

impl RandomDesign {
    /// No random effects (`b = 0`).
    pub fn none(n: usize) -> Self {
        Self {
            z: CscMatrix::from_columns(n, Vec::new()).expect("empty"),
            block_sizes: Vec::new(),
        }
    }

    /// One indicator block per grouping factor; `levels[i]` is the level of row `i`.
    pub fn from_indicators(n: usize, factors: &[(Vec<usize>, usize)]) -> Result<Self> {
        let mut columns = Vec::new();
        let mut block_sizes = Vec::new();
        for (levels, n_levels) in factors {
            if levels.len() != n {
                return Err(RemlError::DimensionMismatch(format!(
                    "grouping factor has {} rows, expected {n}",
                    levels.len()
                )));
            }
            let mut cols = vec![Vec::new(); *n_levels];
            for (i, &l) in levels.iter().enumerate() {
                if l >= *n_levels {
                    return Err(RemlError::DimensionMismatch(format!(
                        "level {l} out of range for {n_levels} levels"
                    )));
                }
                cols[l].push((i, 1.0));
            }
            columns.extend(cols);
            block_sizes.push(*n_levels);
        }
        Ok(Self {
            z: CscMatrix::from_columns(n, columns)?,
            block_sizes,
        })
    }

    pub fn from_dense(z: &DenseMatrix, block_sizes: Vec<usize>) -> Result<Self> {
        if block_sizes.iter().sum::<usize>() != z.ncols() {
            return Err(RemlError::DimensionMismatch(format!(
                "block sizes sum to {}, Z has {} columns",
                block_sizes.iter().sum::<usize>(),
                z.ncols()
            )));
        }
        Ok(Self {
            z: CscMatrix::from_dense(z),
            block_sizes,
        })
    }

    pub fn csc(&self) -> &CscMatrix {
        &self.z
    }

    pub fn nrows(&self) -> usize {
        self.z.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.z.ncols()
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    pub fn to_dense(&self) -> DenseMatrix {
        self.z.to_dense()
    }
}

/// Full variance parameter `θ = (σ²; κ)` with `κ = (γ; φ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaVector {
    pub sigma2: f64,
    pub kappa: Vec<f64>,
    /// Leading entries of `kappa` that belong to `G`.
    pub n_gamma: usize,
}

impl ThetaVector {
    pub fn new(sigma2: f64, gamma: &[f64], phi: &[f64]) -> Self {
        Self {
            sigma2,
            kappa: gamma.iter().chain(phi).copied().collect(),
            n_gamma: gamma.len(),
        }
    }

    pub fn from_slice(values: &[f64], n_gamma: usize) -> Self {
        Self {
            sigma2: values[0],
            kappa: values[1..].to_vec(),
            n_gamma,
        }
    }

    pub fn gamma(&self) -> &[f64] {
        &self.kappa[..self.n_gamma]
    }

    pub fn phi(&self) -> &[f64] {
        &self.kappa[self.n_gamma..]
    }

    pub fn len(&self) -> usize {
        1 + self.kappa.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        std::iter::once(self.sigma2).chain(self.kappa.iter().copied()).collect()
    }

    pub fn get(&self, i: usize) -> f64 {
        if i == 0 {
            self.sigma2
        } else {
            self.kappa[i - 1]
        }
    }
}

/// Role of a coordinate of `θ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Scale,
    Random(usize),
    Residual(usize),
}

/// `A = residual + Z · random · Zᵀ`, the shape of `V` and of all its derivatives.
#[derive(Debug, Clone, Default)]
pub struct StructuredMatrix {
    pub residual: ResidualPart,
    pub random: Option<DenseMatrix>,
}

#[derive(Debug, Clone, Default)]
pub enum ResidualPart {
    #[default]
    Zero,
    ScaledIdentity(f64),
    Dense(DenseMatrix),
}

impl ResidualPart {
    fn from_structure(
        r: &VarianceStructure,
        m: impl FnOnce() -> Result<DenseMatrix>,
        scale: f64,
    ) -> Result<Self> {
        Ok(match r {
            VarianceStructure::Identity { .. } => Self::ScaledIdentity(scale),
            _ => Self::Dense(m()? * scale),
        })
    }
}

impl StructuredMatrix {
    pub fn is_zero(&self) -> bool {
        matches!(self.residual, ResidualPart::Zero) && self.random.is_none()
    }

    pub fn to_dense(&self, z: &RandomDesign) -> DenseMatrix {
        let n = z.nrows();
        let mut a = match &self.residual {
            ResidualPart::Zero => DenseMatrix::zeros(n, n),
            ResidualPart::ScaledIdentity(c) => DenseMatrix::identity(n, n) * *c,
            ResidualPart::Dense(m) => m.clone(),
        };
        if let Some(g) = &self.random {
            let zd = z.to_dense();
            a += &zd * g * zd.transpose();
        }
        symmetrize(&a)
    }

    /// `A v` without forming `A`.
    pub fn apply(&self, z: &RandomDesign, v: &Vector) -> Vector {
        let mut out = match &self.residual {
            ResidualPart::Zero => Vector::zeros(v.len()),
            ResidualPart::ScaledIdentity(c) => v * *c,
            ResidualPart::Dense(m) => m * v,
        };
        if let Some(g) = &self.random {
            let ztv = Vector::from_vec(z.csc().tr_mul_vec(v.as_slice()));
            let gz = g * ztv;
            out += Vector::from_vec(z.csc().mul_vec(gz.as_slice()));
        }
        out
    }
}

/// Dense `G`, `G⁻¹`, `R`, `R⁻¹`, `H = R + Z G Zᵀ` and `H⁻¹` from the Woodbury identity.
#[derive(Debug, Clone)]
pub struct StandardBlocks {
    pub g: DenseMatrix,
    pub g_inv: DenseMatrix,
    pub r: DenseMatrix,
    pub r_inv: DenseMatrix,
    pub h: DenseMatrix,
    pub h_inv: DenseMatrix,
}

/// A linear mixed model: data, designs and variance structures.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    y: Vector,
    x: DenseMatrix,
    z: RandomDesign,
    g: VarianceStructure,
    r: VarianceStructure,
    parameterization: Parameterization,
    names: Vec<String>,
}

impl ModelSpec {
    pub fn new(
        y: Vector,
        x: DenseMatrix,
        z: RandomDesign,
        g: VarianceStructure,
        r: VarianceStructure,
        parameterization: Parameterization,
    ) -> Result<Self> {
        let (n, p) = x.shape();
        if p < 1 || n <= p {
            return Err(RemlError::InvalidModel(format!(
                "need n > p >= 1, got n = {n}, p = {p}"
            )));
        }
        if y.len() != n {
            return Err(RemlError::DimensionMismatch(format!(
                "y has {} entries, X has {n} rows",
                y.len()
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(RemlError::InvalidModel("non-finite entries in y or X".into()));
        }
        if z.nrows() != n {
            return Err(RemlError::DimensionMismatch(format!(
                "Z has {} rows, expected {n}",
                z.nrows()
            )));
        }
        if g.dim() != z.ncols() {
            return Err(RemlError::DimensionMismatch(format!(
                "G has dimension {}, Z has {} columns",
                g.dim(),
                z.ncols()
            )));
        }
        if r.dim() != n {
            return Err(RemlError::DimensionMismatch(format!(
                "R has dimension {}, expected {n}",
                r.dim()
            )));
        }
        for s in [&g, &r] {
            if let VarianceStructure::Explicit(e) = s {
                let k = e.components.len();
                if e.lower.len() != k || e.upper.len() != k || e.initial.len() != k {
                    return Err(RemlError::InvalidModel(
                        "explicit structure bounds and initial values must match its components"
                            .into(),
                    ));
                }
                if e.base.is_none() && k == 0 {
                    return Err(RemlError::InvalidModel("explicit structure is empty".into()));
                }
            }
        }
        linalg::check_full_rank(&x)?;
        let mut names = vec!["sigma2".to_string()];
        names.extend((0..g.n_params()).map(|k| format!("gamma[{k}]")));
        names.extend((0..r.n_params()).map(|k| format!("phi[{k}]")));
        Ok(Self {
            y,
            x,
            z,
            g,
            r,
            parameterization,
            names,
        })
    }

    /// Renames the random-effect (`γ`) parameters, e.g. after grouping factors.
    pub fn with_random_names(mut self, names: &[String]) -> Self {
        for (k, name) in names.iter().enumerate().take(self.g.n_params()) {
            self.names[1 + k] = name.clone();
        }
        self
    }

    /// Same design and structures with a new response.
    pub fn with_response(&self, y: Vector) -> Result<Self> {
        if y.len() != self.n() {
            return Err(RemlError::DimensionMismatch(format!(
                "response has {} entries, expected {}",
                y.len(),
                self.n()
            )));
        }
        let mut out = self.clone();
        out.y = y;
        Ok(out)
    }

    pub fn y(&self) -> &Vector {
        &self.y
    }

    pub fn x(&self) -> &DenseMatrix {
        &self.x
    }

    pub fn z(&self) -> &RandomDesign {
        &self.z
    }

    pub fn g_structure(&self) -> &VarianceStructure {
        &self.g
    }

    pub fn r_structure(&self) -> &VarianceStructure {
        &self.r
    }

    pub fn parameterization(&self) -> Parameterization {
        self.parameterization
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn b(&self) -> usize {
        self.z.ncols()
    }

    pub fn n_params(&self) -> usize {
        1 + self.g.n_params() + self.r.n_params()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// `V̈ ≡ 0`: `V` depends linearly on `θ`.
    pub fn is_linear(&self) -> bool {
        self.r.n_params() == 0
            && self.g.is_linear()
            && (self.parameterization == Parameterization::Components || self.g.n_params() == 0)
    }

    pub fn role(&self, i: usize) -> Result<ParamRole> {
        let ng = self.g.n_params();
        let count = self.n_params();
        match i {
            0 => Ok(ParamRole::Scale),
            i if i <= ng => Ok(ParamRole::Random(i - 1)),
            i if i < count => Ok(ParamRole::Residual(i - 1 - ng)),
            _ => Err(RemlError::IndexOutOfRange { index: i, count }),
        }
    }

    /// Admissible interval of coordinate `i` of `θ`.
    pub fn bounds(&self, i: usize) -> Result<(f64, f64)> {
        Ok(match self.role(i)? {
            ParamRole::Scale => (0.0, f64::INFINITY),
            ParamRole::Random(k) => self.g.bounds(k),
            ParamRole::Residual(k) => self.r.bounds(k),
        })
    }

    /// Builds `θ` from a flat vector laid out as `(σ², γ…, φ…)`.
    pub fn theta_from_slice(&self, values: &[f64]) -> Result<ThetaVector> {
        if values.len() != self.n_params() {
            return Err(RemlError::DimensionMismatch(format!(
                "model has {} parameters, got {}",
                self.n_params(),
                values.len()
            )));
        }
        Ok(ThetaVector::from_slice(values, self.g.n_params()))
    }

    pub fn check_admissible(&self, theta: &ThetaVector) -> Result<()> {
        if theta.len() != self.n_params() || theta.n_gamma != self.g.n_params() {
            return Err(RemlError::DimensionMismatch(format!(
                "θ has {} entries ({} for G), model expects {} ({} for G)",
                theta.len(),
                theta.n_gamma,
                self.n_params(),
                self.g.n_params()
            )));
        }
        for i in 0..self.n_params() {
            let (lower, upper) = self.bounds(i)?;
            let value = theta.get(i);
            let ok = if i == 0 { value > 0.0 } else { value >= lower };
            if !(ok && value <= upper && value.is_finite()) {
                return Err(RemlError::InadmissibleParameter {
                    index: i,
                    value,
                    lower,
                    upper,
                });
            }
        }
        Ok(())
    }

    /// Scale-free `G` entering `H = R + Z G Zᵀ` and the mixed model equations.
    pub fn g_matrix(&self, theta: &ThetaVector) -> Result<DenseMatrix> {
        let g = self.g.value(theta.gamma())?;
        Ok(match self.parameterization {
            Parameterization::Ratio => g,
            Parameterization::Components => g / theta.sigma2,
        })
    }

    /// Sparse `G⁻¹` on the scale-free level.
    pub fn g_inverse(&self, theta: &ThetaVector) -> Result<CscMatrix> {
        let inv = self.g.inverse(theta.gamma())?;
        Ok(match self.parameterization {
            Parameterization::Ratio => inv,
            Parameterization::Components => {
                let s = theta.sigma2;
                let columns = (0..inv.ncols())
                    .map(|j| inv.column(j).map(|(i, v)| (i, v * s)).collect())
                    .collect();
                CscMatrix::from_columns(inv.nrows(), columns)?
            }
        })
    }

    pub fn logdet_g(&self, theta: &ThetaVector) -> Result<f64> {
        let ld = self.g.logdet(theta.gamma())?;
        Ok(match self.parameterization {
            Parameterization::Ratio => ld,
            Parameterization::Components => ld - self.b() as f64 * theta.sigma2.ln(),
        })
    }

    pub fn r_matrix(&self, theta: &ThetaVector) -> Result<DenseMatrix> {
        self.r.value(theta.phi())
    }

    pub fn r_inverse(&self, theta: &ThetaVector) -> Result<CscMatrix> {
        self.r.inverse(theta.phi())
    }

    pub fn logdet_r(&self, theta: &ThetaVector) -> Result<f64> {
        self.r.logdet(theta.phi())
    }

    /// `V(θ)` in structured form.
    pub fn variance_structured(&self, theta: &ThetaVector) -> Result<StructuredMatrix> {
        self.check_admissible(theta)?;
        let s2 = theta.sigma2;
        let random = (self.b() > 0).then(|| self.g_matrix(theta).map(|g| g * s2)).transpose()?;
        Ok(StructuredMatrix {
            residual: ResidualPart::from_structure(&self.r, || self.r_matrix(theta), s2)?,
            random,
        })
    }

    /// `∂V/∂θ_i` in structured form.
    pub fn first_structured(&self, theta: &ThetaVector, i: usize) -> Result<StructuredMatrix> {
        let s2 = theta.sigma2;
        let ratio = self.parameterization == Parameterization::Ratio;
        Ok(match self.role(i)? {
            ParamRole::Scale => StructuredMatrix {
                residual: ResidualPart::from_structure(&self.r, || self.r_matrix(theta), 1.0)?,
                random: (ratio && self.b() > 0)
                    .then(|| self.g_matrix(theta))
                    .transpose()?,
            },
            ParamRole::Random(k) => {
                let gk = self.g.first(theta.gamma(), k)?;
                StructuredMatrix {
                    residual: ResidualPart::Zero,
                    random: Some(if ratio { gk * s2 } else { gk }),
                }
            }
            ParamRole::Residual(k) => StructuredMatrix {
                residual: ResidualPart::Dense(self.r.first(theta.phi(), k)? * s2),
                random: None,
            },
        })
    }

    /// `∂²V/∂θ_i∂θ_j` in structured form.
    pub fn second_structured(
        &self,
        theta: &ThetaVector,
        i: usize,
        j: usize,
    ) -> Result<StructuredMatrix> {
        let s2 = theta.sigma2;
        let ratio = self.parameterization == Parameterization::Ratio;
        let (a, b) = (self.role(i)?, self.role(j)?);
        let (a, b) = if i <= j { (a, b) } else { (b, a) };
        Ok(match (a, b) {
            (ParamRole::Scale, ParamRole::Random(k)) if ratio => StructuredMatrix {
                residual: ResidualPart::Zero,
                random: Some(self.g.first(theta.gamma(), k)?),
            },
            (ParamRole::Scale, ParamRole::Residual(k)) => StructuredMatrix {
                residual: ResidualPart::Dense(self.r.first(theta.phi(), k)?),
                random: None,
            },
            (ParamRole::Random(k), ParamRole::Random(l)) => StructuredMatrix {
                residual: ResidualPart::Zero,
                random: self
                    .g
                    .second(theta.gamma(), k, l)?
                    .map(|m| if ratio { m * s2 } else { m }),
            },
            (ParamRole::Residual(k), ParamRole::Residual(l)) => StructuredMatrix {
                residual: self
                    .r
                    .second(theta.phi(), k, l)?
                    .map_or(ResidualPart::Zero, |m| ResidualPart::Dense(m * s2)),
                random: None,
            },
            _ => StructuredMatrix::default(),
        })
    }

    /// `V = σ²(R + Z G Zᵀ)`.
    pub fn variance_value(&self, theta: &ThetaVector) -> Result<DenseMatrix> {
        Ok(self.variance_structured(theta)?.to_dense(&self.z))
    }

    pub fn variance_first_derivative(&self, theta: &ThetaVector, i: usize) -> Result<DenseMatrix> {
        self.role(i)?;
        self.check_admissible(theta)?;
        Ok(self.first_structured(theta, i)?.to_dense(&self.z))
    }

    pub fn variance_second_derivative(
        &self,
        theta: &ThetaVector,
        i: usize,
        j: usize,
    ) -> Result<DenseMatrix> {
        self.role(i)?;
        self.role(j)?;
        self.check_admissible(theta)?;
        Ok(self.second_structured(theta, i, j)?.to_dense(&self.z))
    }

    /// `H = V / σ²`.
    pub fn h_matrix(&self, theta: &ThetaVector) -> Result<DenseMatrix> {
        Ok(self.variance_value(theta)? / theta.sigma2)
    }

    pub fn standard_blocks(&self, theta: &ThetaVector) -> Result<StandardBlocks> {
        self.check_admissible(theta)?;
        let g = self.g_matrix(theta)?;
        let r = self.r_matrix(theta)?;
        let r_inv = self.r_inverse(theta)?.to_dense();
        let zd = self.z.to_dense();
        let (g_inv, h_inv) = if self.b() == 0 {
            (DenseMatrix::zeros(0, 0), r_inv.clone())
        } else {
            let g_inv = self.g_inverse(theta)?.to_dense();
            let rz = &r_inv * &zd;
            let inner = &g_inv + zd.transpose() * &rz;
            let inner_inv = spd_inverse(&symmetrize(&inner))?;
            let h_inv = &r_inv - &rz * inner_inv * rz.transpose();
            (g_inv, symmetrize(&h_inv))
        };
        let h = symmetrize(&(&r + &zd * &g * zd.transpose()));
        Ok(StandardBlocks {
            g,
            g_inv,
            r,
            r_inv,
            h,
            h_inv,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs;

    fn intercept(n: usize) -> DenseMatrix {
        DenseMatrix::from_element(n, 1, 1.0)
    }

    fn oneway(n: usize, groups: usize, param: Parameterization) -> ModelSpec {
        let levels: Vec<usize> = (0..n).map(|i| i % groups).collect();
        let z = RandomDesign::from_indicators(n, &[(levels, groups)]).unwrap();
        let y = Vector::from_fn(n, |i, _| (i as f64 * 0.7).sin());
        ModelSpec::new(
            y,
            intercept(n),
            z,
            VarianceStructure::IidBlocks { sizes: vec![groups] },
            VarianceStructure::Identity { dim: n },
            param,
        )
        .unwrap()
    }

    fn ar1_model(n: usize) -> ModelSpec {
        ModelSpec::new(
            Vector::from_fn(n, |i, _| i as f64),
            intercept(n),
            RandomDesign::none(n),
            VarianceStructure::Identity { dim: 0 },
            VarianceStructure::ar1(n),
            Parameterization::Ratio,
        )
        .unwrap()
    }

    #[test]
    fn no_random_effects_identity_residual() {
        let n = 4;
        let m = ModelSpec::new(
            Vector::zeros(n),
            intercept(n),
            RandomDesign::none(n),
            VarianceStructure::Identity { dim: 0 },
            VarianceStructure::Identity { dim: n },
            Parameterization::Ratio,
        )
        .unwrap();
        let th = ThetaVector::new(2.0, &[], &[]);
        assert_eq!(m.variance_value(&th).unwrap(), DenseMatrix::identity(n, n) * 2.0);
        let b = m.standard_blocks(&th).unwrap();
        assert_eq!(b.h, DenseMatrix::identity(n, n));
        assert_eq!(b.h_inv, DenseMatrix::identity(n, n));
        assert!(m.is_linear());
    }

    #[test]
    fn ar1_at_zero_is_identity() {
        let m = ar1_model(5);
        assert_eq!(m.r_matrix(&ThetaVector::new(1.0, &[], &[0.0])).unwrap(), DenseMatrix::identity(5, 5));
    }

    #[test]
    fn ar1_inverse_and_logdet_closed_forms() {
        let s = VarianceStructure::ar1(6);
        let r = s.value(&[0.6]).unwrap();
        let inv = s.inverse(&[0.6]).unwrap().to_dense();
        assert!(max_abs(&(&r * inv - DenseMatrix::identity(6, 6))) < 1e-13);
        assert!((s.logdet(&[0.6]).unwrap() - spd_logdet(&r).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn oneway_variance_is_symmetric_pd() {
        let m = oneway(9, 3, Parameterization::Ratio);
        let th = ThetaVector::new(1.5, &[0.4], &[]);
        let v = m.variance_value(&th).unwrap();
        assert_eq!(v, v.transpose());
        let zd = m.z().to_dense();
        let expected = DenseMatrix::identity(9, 9) * 1.5 + &zd * zd.transpose() * (1.5 * 0.4);
        assert!(max_abs(&(&v - expected)) < 1e-14);
        assert!(linalg::ldlt_factor(&v).unwrap().is_positive_definite());
    }

    #[test]
    fn scale_derivative_is_h_under_ratio() {
        let m = oneway(9, 3, Parameterization::Ratio);
        let th = ThetaVector::new(1.5, &[0.4], &[]);
        let d = m.variance_first_derivative(&th, 0).unwrap();
        assert!(max_abs(&(d - m.h_matrix(&th).unwrap())) < 1e-14);
        assert!(!m.is_linear());
    }

    #[test]
    fn components_are_linear_and_euler_identity_holds() {
        let m = oneway(12, 4, Parameterization::Components);
        assert!(m.is_linear());
        let th = ThetaVector::new(0.8, &[1.7], &[]);
        let v = m.variance_value(&th).unwrap();
        let zd = m.z().to_dense();
        let d1 = m.variance_first_derivative(&th, 1).unwrap();
        assert_eq!(d1, &zd * zd.transpose());
        let mut sum = DenseMatrix::zeros(12, 12);
        for i in 0..m.n_params() {
            sum += m.variance_first_derivative(&th, i).unwrap() * th.get(i);
        }
        assert!(max_abs(&(sum - v)) < 1e-14);
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(max_abs(&m.variance_second_derivative(&th, i, j).unwrap()), 0.0);
            }
        }
    }

    #[test]
    fn cross_second_derivative_under_ratio() {
        let m = oneway(6, 2, Parameterization::Ratio);
        let th = ThetaVector::new(2.0, &[0.3], &[]);
        let d01 = m.variance_second_derivative(&th, 0, 1).unwrap();
        let h_k = m.variance_first_derivative(&th, 1).unwrap() / th.sigma2;
        assert!(max_abs(&(&d01 - h_k)) < 1e-14);
        assert_eq!(d01, m.variance_second_derivative(&th, 1, 0).unwrap());
    }

    #[test]
    fn diagonal_g_with_identity_z_woodbury() {
        let n = 4;
        let z = RandomDesign::from_dense(&DenseMatrix::identity(n, n), vec![1; n]).unwrap();
        let gammas = [0.5, 1.0, 2.0, 3.0];
        let m = ModelSpec::new(
            Vector::zeros(n),
            intercept(n),
            z,
            VarianceStructure::IidBlocks { sizes: vec![1; n] },
            VarianceStructure::Identity { dim: n },
            Parameterization::Ratio,
        )
        .unwrap();
        let b = m.standard_blocks(&ThetaVector::new(1.0, &gammas, &[])).unwrap();
        for (i, g) in gammas.iter().enumerate() {
            assert!((b.h_inv[(i, i)] - 1.0 / (1.0 + g)).abs() < 1e-15);
        }
        assert!(max_abs(&(b.h_inv.clone() - DenseMatrix::from_diagonal(&b.h_inv.diagonal()))) == 0.0);
    }

    #[test]
    fn inadmissible_and_out_of_range() {
        let m = ar1_model(4);
        let bad = ThetaVector::new(1.0, &[], &[0.995]);
        assert!(matches!(
            m.variance_value(&bad),
            Err(RemlError::InadmissibleParameter { index: 1, .. })
        ));
        let th = ThetaVector::new(1.0, &[], &[0.2]);
        assert!(matches!(
            m.variance_first_derivative(&th, 2),
            Err(RemlError::IndexOutOfRange { index: 2, count: 2 })
        ));
        assert!(m.variance_value(&ThetaVector::new(0.0, &[], &[0.2])).is_err());
    }

    #[test]
    fn rank_deficient_x_rejected() {
        let n = 5;
        let x = DenseMatrix::from_fn(n, 2, |_, _| 1.0);
        let err = ModelSpec::new(
            Vector::zeros(n),
            x,
            RandomDesign::none(n),
            VarianceStructure::Identity { dim: 0 },
            VarianceStructure::Identity { dim: n },
            Parameterization::Ratio,
        )
        .unwrap_err();
        assert!(matches!(err, RemlError::RankDeficient(_)));
    }

    #[test]
    fn structured_apply_matches_dense() {
        let m = oneway(10, 3, Parameterization::Ratio);
        let th = ThetaVector::new(1.3, &[0.7], &[]);
        let v = Vector::from_fn(10, |i, _| (i as f64).cos());
        for i in 0..m.n_params() {
            let s = m.first_structured(&th, i).unwrap();
            let dense = s.to_dense(m.z());
            assert!(linalg::max_abs_vec(&(s.apply(m.z(), &v) - dense * &v)) < 1e-13);
        }
    }
}
