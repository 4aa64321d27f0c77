use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

/// Rewrites a module output `z: [rows, d_model]` before it enters the
/// residual stream. `block` indexes the module in site-map order.
pub trait Intervention<T: Real> {
    fn apply(&self, tape: &mut Tape<T>, block: usize, z: Var) -> Result<Var>;
}

impl<T: Real, F> Intervention<T> for F
where
    F: Fn(&mut Tape<T>, usize, Var) -> Result<Var>,
{
    fn apply(&self, tape: &mut Tape<T>, block: usize, z: Var) -> Result<Var> {
        self(tape, block, z)
    }
}

pub struct NoHook;

impl<T: Real> Intervention<T> for NoHook {
    fn apply(&self, _: &mut Tape<T>, _: usize, z: Var) -> Result<Var> {
        Ok(z)
    }
}

fn check_lengths(what: &str, mask: usize, fill: usize, width: usize) -> Result<()> {
    if mask != fill || width == 0 || mask % width != 0 {
        return Err(Error::SiteMapMismatch(format!(
            "{}: mask length {}, fill length {}, module width {}",
            what, mask, fill, width
        )));
    }
    Ok(())
}

/// Exact replacement: site `i` keeps its value where `keep[i]`, otherwise
/// carries `fill[i]`. Fully kept modules pass through untouched.
pub struct HardMask<'a, T> {
    keep: &'a [bool],
    fill: &'a [T],
    width: usize,
}

impl<'a, T: Real> HardMask<'a, T> {
    pub fn new(keep: &'a [bool], fill: &'a [T], width: usize) -> Result<Self> {
        check_lengths("hard mask", keep.len(), fill.len(), width)?;
        Ok(HardMask { keep, fill, width })
    }
}

impl<T: Real> Intervention<T> for HardMask<'_, T> {
    fn apply(&self, tape: &mut Tape<T>, block: usize, z: Var) -> Result<Var> {
        let r = block * self.width..(block + 1) * self.width;
        if r.end > self.keep.len() {
            return Err(Error::SiteMapMismatch(format!("module {} beyond mask", block)));
        }
        let keep = &self.keep[r.clone()];
        if keep.iter().all(|&k| k) {
            return Ok(z);
        }
        tape.select_cols(z, keep, &self.fill[r])
    }
}

/// Relaxed mask `gate * z + (1 - gate) * fill`, with `gate: [N]` on the tape
/// (one value per site, shared across positions).
pub struct SoftMask<'a, T> {
    gate: Var,
    fill: &'a [T],
    width: usize,
}

impl<'a, T: Real> SoftMask<'a, T> {
    pub fn new(tape: &Tape<T>, gate: Var, fill: &'a [T], width: usize) -> Result<Self> {
        check_lengths("soft mask", tape.value(gate).len(), fill.len(), width)?;
        Ok(SoftMask { gate, fill, width })
    }
}

impl<T: Real> Intervention<T> for SoftMask<'_, T> {
    fn apply(&self, tape: &mut Tape<T>, block: usize, z: Var) -> Result<Var> {
        let start = block * self.width;
        if start + self.width > self.fill.len() {
            return Err(Error::SiteMapMismatch(format!("module {} beyond mask", block)));
        }
        let g = tape.slice(self.gate, 0, start, self.width)?;
        tape.mix(z, g, &self.fill[start..start + self.width])
    }
}
