//! Frequency enhancement: cross-scale band complementation between the
//! shallow stage and each deeper stage in the DFT domain.

use crate::attention::Projection;
use crate::error::{Error, Result};
use crate::numerics::{CVar, Graph, Scalar, Var};
use crate::spectral::{check_tau, split_bands_var, BandMode};

/// Threshold and band rule shared by every enhancement call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FemConfig {
    pub tau: f64,
    pub mode: BandMode,
}

impl Default for FemConfig {
    fn default() -> Self {
        FemConfig {
            tau: 0.5,
            mode: BandMode::Radial,
        }
    }
}

/// Shallow map and one deeper map already aligned to its grid and width.
#[derive(Clone, Copy, Debug)]
pub struct FemInput {
    pub e1: Var,
    pub ei: Var,
    pub stage: usize,
}

impl FemInput {
    pub fn new<T: Scalar>(g: &Graph<T>, e1: Var, ei: Var, stage: usize) -> Result<Self> {
        if g.shape(e1).len() != 3 || g.shape(e1) != g.shape(ei) {
            return Err(Error::dim(format!(
                "stage {stage}: maps must share [h, w, d], got {:?} and {:?}",
                g.shape(e1),
                g.shape(ei)
            )));
        }
        Ok(FemInput { e1, ei, stage })
    }
}

/// Intermediate spectra of one enhancement call.
#[derive(Clone, Copy, Debug)]
pub struct FemBands {
    /// `Hi(E1) − Hi(Ei)`
    pub d_h: CVar,
    /// `Lo(Ei) − Lo(E1)`
    pub d_l: CVar,
    /// `[d_h, Ei]` along channels
    pub f_1to_i: CVar,
    /// `[d_l, E1]` along channels
    pub f_ito_1: CVar,
}

fn csub<T: Scalar>(g: &mut Graph<T>, a: CVar, b: CVar) -> Result<CVar> {
    Ok(CVar {
        re: g.sub(a.re, b.re)?,
        im: g.sub(a.im, b.im)?,
    })
}

fn cconcat<T: Scalar>(g: &mut Graph<T>, a: CVar, b: CVar) -> Result<CVar> {
    Ok(CVar {
        re: g.concat_channels(&[a.re, b.re])?,
        im: g.concat_channels(&[a.im, b.im])?,
    })
}

pub fn fem_bands<T: Scalar>(g: &mut Graph<T>, inp: &FemInput, cfg: FemConfig) -> Result<FemBands> {
    check_tau(cfg.tau)?;
    let f1 = g.dfft2(inp.e1)?;
    let fi = g.dfft2(inp.ei)?;
    let (hi1, lo1) = split_bands_var(g, f1, cfg.tau, cfg.mode)?;
    let (hii, loi) = split_bands_var(g, fi, cfg.tau, cfg.mode)?;
    let d_h = csub(g, hi1, hii)?;
    let f_1to_i = cconcat(g, d_h, fi)?;
    let d_l = csub(g, loi, lo1)?;
    let f_ito_1 = cconcat(g, d_l, f1)?;
    Ok(FemBands {
        d_h,
        d_l,
        f_1to_i,
        f_ito_1,
    })
}

/// `IDFT([Lo(Ei) − Lo(E1), E1] + [Hi(E1) − Hi(Ei), Ei])` → `[h, w, 2d]`.
pub fn fem_enhance<T: Scalar>(g: &mut Graph<T>, inp: &FemInput, cfg: FemConfig) -> Result<Var> {
    let b = fem_bands(g, inp, cfg)?;
    let sum = CVar {
        re: g.add(b.f_ito_1.re, b.f_1to_i.re)?,
        im: g.add(b.f_ito_1.im, b.f_1to_i.im)?,
    };
    g.idfft2(sum)
}

/// Learnable maps of the frequency path: per-stage width projections to `d`
/// and the final `6d → 4d` projection.
#[derive(Clone, Copy, Debug)]
pub struct FemParams {
    pub lateral: [Projection; 4],
    pub out: Projection,
}

/// Apply a 1×1 projection to an `[h, w, c]` map.
pub fn project_map<T: Scalar>(g: &mut Graph<T>, map: Var, p: &Projection) -> Result<Var> {
    let (h, w, c) = match *g.shape(map) {
        [h, w, c] => (h, w, c),
        ref s => return Err(Error::dim(format!("expected [h, w, c], got {s:?}"))),
    };
    let flat = g.reshape(map, [h * w, c])?;
    let y = p.apply(g, flat)?;
    let d = g.shape(y)[1];
    g.reshape(y, [h, w, d])
}

/// Projected `(E1, Ei)` pairs for stages 2..=4, each `Ei` resampled to
/// `E1`'s grid.
pub fn fem_stage_inputs<T: Scalar>(g: &mut Graph<T>, pyramid: &[Var], params: &FemParams) -> Result<Vec<FemInput>> {
    if pyramid.len() != 4 {
        return Err(Error::param(format!(
            "frequency enhancement needs 4 stages, got {}",
            pyramid.len()
        )));
    }
    let e1 = project_map(g, pyramid[0], &params.lateral[0])?;
    let (h1, w1) = (g.shape(e1)[0], g.shape(e1)[1]);
    let mut inputs = Vec::with_capacity(3);
    for i in 1..4 {
        let ei = project_map(g, pyramid[i], &params.lateral[i])?;
        let ei = if (g.shape(ei)[0], g.shape(ei)[1]) == (h1, w1) {
            ei
        } else {
            g.bilinear_resize(ei, h1, w1)?
        };
        inputs.push(FemInput::new(g, e1, ei, i + 1)?);
    }
    Ok(inputs)
}

/// Frequency-enhanced feature `F` on `E1`'s grid with `4d` channels.
pub fn fem_aggregate<T: Scalar>(g: &mut Graph<T>, pyramid: &[Var], cfg: FemConfig, params: &FemParams) -> Result<Var> {
    let mut parts = Vec::with_capacity(3);
    for inp in fem_stage_inputs(g, pyramid, params)? {
        parts.push(fem_enhance(g, &inp, cfg)?);
    }
    let f = g.concat_channels(&parts)?;
    project_map(g, f, &params.out)
}
