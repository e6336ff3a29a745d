use rand::Rng;

use super::discretize::zoh_scalar;
use super::params::{DiscreteSsm, StateMatrix};
use super::scan::scan_recurrent;
use crate::counters::Counters;
use crate::error::{Error, Result};
use crate::nn::{inverse_softplus, rms_norm_into, silu, softplus, Linear};
use crate::rng::gaussian_vec;

const NORM_EPS: f64 = 1e-6;

/// Feature switches of the sequence block. All on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    /// Input-dependent `Δ`, `B`, `C`; otherwise fixed per-channel parameters.
    pub selective: bool,
    /// Average a forward and a reversed scan.
    pub bidirectional: bool,
    /// Multiply the scan output by `silu(W_g x + b_g)`.
    pub gate: bool,
    /// RMS-normalise each timestep before the scan.
    pub norm: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            selective: true,
            bidirectional: true,
            gate: true,
            norm: true,
        }
    }
}

impl BlockConfig {
    /// Linear in its input: fixed parameters, no gate, no normalisation.
    pub fn linear() -> Self {
        Self {
            selective: false,
            bidirectional: true,
            gate: false,
            norm: false,
        }
    }

    pub(super) fn flags(&self) -> u32 {
        (self.selective as u32) | (self.bidirectional as u32) << 1 | (self.gate as u32) << 2 | (self.norm as u32) << 3
    }

    pub(super) fn from_flags(flags: u32) -> Result<Self> {
        if flags & !0xF != 0 {
            return Err(Error::Format(format!("unknown SSM flag bits {flags:#x}")));
        }
        Ok(Self {
            selective: flags & 1 != 0,
            bidirectional: flags & 2 != 0,
            gate: flags & 4 != 0,
            norm: flags & 8 != 0,
        })
    }
}

/// Sequence layer over `M × D` inputs: pre-norm, per-channel diagonal SSM
/// (selective or fixed), optional reversed pass, SiLU gate, residual.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmBlock {
    pub(super) channels: usize,
    pub(super) state: usize,
    pub(super) config: BlockConfig,
    pub(super) norm_weight: Vec<f64>,
    /// `channels × state`, continuous diagonal `A`.
    pub(super) a: Vec<f64>,
    pub(super) skip: Vec<f64>,
    pub(super) delta_proj: Linear,
    pub(super) b_proj: Linear,
    pub(super) c_proj: Linear,
    pub(super) fixed_delta: Vec<f64>,
    pub(super) fixed_b: Vec<f64>,
    pub(super) fixed_c: Vec<f64>,
    pub(super) gate_proj: Linear,
}

impl SsmBlock {
    pub fn seeded(channels: usize, state: usize, config: BlockConfig, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 || state == 0 {
            return Err(Error::param(format!("SSM block needs channels and state >= 1 ({channels}, {state})")));
        }
        let a = (0..channels)
            .flat_map(|_| (0..state).map(|i| -((i + 1) as f64)))
            .collect();
        let mut delta_proj = Linear::seeded(channels, channels, rng);
        delta_proj.weight.iter_mut().for_each(|w| *w *= 0.1);
        delta_proj.bias = (0..channels).map(|_| inverse_softplus(log_uniform_delta(rng))).collect();
        let b_proj = Linear::seeded(channels, state, rng);
        let c_proj = Linear::seeded(channels, state, rng);
        let fixed_delta = (0..channels).map(|_| log_uniform_delta(rng)).collect();
        let scale = 1.0 / (state as f64).sqrt();
        let fixed_b = gaussian_vec(rng, channels * state, 1.0);
        let fixed_c = gaussian_vec(rng, channels * state, scale);
        let gate_proj = Linear::seeded(channels, channels, rng);
        Ok(Self {
            channels,
            state,
            config,
            norm_weight: vec![1.0; channels],
            a,
            skip: vec![1.0; channels],
            delta_proj,
            b_proj,
            c_proj,
            fixed_delta,
            fixed_b,
            fixed_c,
            gate_proj,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn config(&self) -> BlockConfig {
        self.config
    }

    pub fn set_config(&mut self, config: BlockConfig) {
        self.config = config;
    }

    pub fn gate_proj_mut(&mut self) -> &mut Linear {
        &mut self.gate_proj
    }

    /// Discrete system of channel `c` in fixed mode.
    pub fn channel_system(&self, c: usize) -> Result<DiscreteSsm> {
        if c >= self.channels {
            return Err(Error::param(format!("channel {c} of {}", self.channels)));
        }
        let delta = self.fixed_delta[c];
        let mut a_bar = Vec::with_capacity(self.state);
        let mut b_bar = Vec::with_capacity(self.state);
        for i in 0..self.state {
            let (ab, s) = zoh_scalar(self.a[c * self.state + i], delta);
            a_bar.push(ab);
            b_bar.push(s * self.fixed_b[c * self.state + i]);
        }
        let cvec = self.fixed_c[c * self.state..(c + 1) * self.state].to_vec();
        DiscreteSsm::from_parts(StateMatrix::Diagonal(a_bar), b_bar, cvec, self.skip[c])
    }

    pub fn forward(&self, x: &[f64], len: usize) -> Result<Vec<f64>> {
        self.forward_counted(x, len, &Counters::new())
    }

    /// Full block on a row-major `len × channels` sequence.
    pub fn forward_counted(&self, x: &[f64], len: usize, counters: &Counters) -> Result<Vec<f64>> {
        let (u, scan) = self.scan_stage(x, len, counters)?;
        let mut out = scan;
        if self.config.gate {
            let mut g = vec![0.0; self.channels];
            for k in 0..len {
                let row = k * self.channels..(k + 1) * self.channels;
                self.gate_proj.forward_into(&u[row.clone()], &mut g);
                for (s, gv) in out[row].iter_mut().zip(&g) {
                    *s *= silu(*gv);
                }
            }
        }
        for (o, xv) in out.iter_mut().zip(x) {
            *o += xv;
        }
        Ok(out)
    }

    /// Output of the (bidirectional) scan before gating and residual.
    pub fn pre_gate(&self, x: &[f64], len: usize) -> Result<Vec<f64>> {
        Ok(self.scan_stage(x, len, &Counters::new())?.1)
    }

    fn scan_stage(&self, x: &[f64], len: usize, counters: &Counters) -> Result<(Vec<f64>, Vec<f64>)> {
        if len == 0 {
            return Err(Error::EmptySequence);
        }
        if x.len() != len * self.channels {
            return Err(Error::dims(format!(
                "SSM block expects {len}x{} inputs, got {}",
                self.channels,
                x.len()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("SSM block input"));
        }
        let u = if self.config.norm {
            let mut u = vec![0.0; x.len()];
            for (src, dst) in x.chunks(self.channels).zip(u.chunks_mut(self.channels)) {
                rms_norm_into(src, &self.norm_weight, NORM_EPS, dst);
            }
            u
        } else {
            x.to_vec()
        };

        let mut y = if self.config.selective {
            self.selective_scans(&u, len)
        } else {
            self.fixed_scans(&u, len)?
        };
        if self.config.bidirectional {
            y.iter_mut().for_each(|v| *v *= 0.5);
        }
        counters.add_ssm_steps(len as u64, if self.config.bidirectional { len as u64 } else { 0 });
        Ok((u, y))
    }

    /// Sum of the forward and (if enabled) reversed selective scans.
    fn selective_scans(&self, u: &[f64], len: usize) -> Vec<f64> {
        let (ch, ns) = (self.channels, self.state);
        let mut delta = vec![0.0; len * ch];
        let mut bk = vec![0.0; len * ns];
        let mut ck = vec![0.0; len * ns];
        for k in 0..len {
            let uk = &u[k * ch..(k + 1) * ch];
            self.delta_proj.forward_into(uk, &mut delta[k * ch..(k + 1) * ch]);
            self.b_proj.forward_into(uk, &mut bk[k * ns..(k + 1) * ns]);
            self.c_proj.forward_into(uk, &mut ck[k * ns..(k + 1) * ns]);
        }
        delta.iter_mut().for_each(|d| *d = softplus(*d));

        let mut y = vec![0.0; len * ch];
        let mut h = vec![0.0; ch * ns];
        let mut run = |steps: &mut dyn Iterator<Item = usize>| {
            h.iter_mut().for_each(|v| *v = 0.0);
            for k in steps {
                let bk = &bk[k * ns..(k + 1) * ns];
                let ck = &ck[k * ns..(k + 1) * ns];
                for c in 0..ch {
                    let d = delta[k * ch + c];
                    let uc = u[k * ch + c];
                    let hc = &mut h[c * ns..(c + 1) * ns];
                    let mut acc = 0.0;
                    for i in 0..ns {
                        let (a_bar, s) = zoh_scalar(self.a[c * ns + i], d);
                        hc[i] = a_bar * hc[i] + s * bk[i] * uc;
                        acc += ck[i] * hc[i];
                    }
                    y[k * ch + c] += acc + self.skip[c] * uc;
                }
            }
        };
        run(&mut (0..len));
        if self.config.bidirectional {
            run(&mut (0..len).rev());
        }
        y
    }

    fn fixed_scans(&self, u: &[f64], len: usize) -> Result<Vec<f64>> {
        let ch = self.channels;
        let mut y = vec![0.0; len * ch];
        let mut seq = vec![0.0; len];
        for c in 0..ch {
            let sys = self.channel_system(c)?;
            for k in 0..len {
                seq[k] = u[k * ch + c];
            }
            let fwd = scan_recurrent(&sys, &seq)?;
            for k in 0..len {
                y[k * ch + c] = fwd[k];
            }
            if self.config.bidirectional {
                seq.reverse();
                let bwd = scan_recurrent(&sys, &seq)?;
                for k in 0..len {
                    y[k * ch + c] += bwd[len - 1 - k];
                }
            }
        }
        Ok(y)
    }
}

/// Timescale drawn log-uniformly from `[1e-3, 1e-1]`.
fn log_uniform_delta(rng: &mut impl Rng) -> f64 {
    let t: f64 = rng.random();
    (1e-3f64.ln() + t * (1e-1f64.ln() - 1e-3f64.ln())).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn block(config: BlockConfig) -> SsmBlock {
        SsmBlock::seeded(4, 3, config, &mut seeded(11)).unwrap()
    }

    #[test]
    fn zero_input_returns_zero() {
        for cfg in [BlockConfig::default(), BlockConfig::linear()] {
            let y = block(cfg).forward(&[0.0; 20], 5).unwrap();
            assert!(y.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn palindromic_input_gives_palindromic_scan() {
        let b = block(BlockConfig::default());
        let half: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).cos()).collect();
        // Rows 0,1,2 then 2,1,0 (4 channels each).
        let mut x = half.clone();
        for r in (0..3).rev() {
            x.extend_from_slice(&half[r * 4..(r + 1) * 4]);
        }
        let s = b.pre_gate(&x, 6).unwrap();
        for k in 0..6 {
            for c in 0..4 {
                assert!((s[k * 4 + c] - s[(5 - k) * 4 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fixed_unidirectional_matches_channel_scans() {
        let cfg = BlockConfig {
            bidirectional: false,
            ..BlockConfig::linear()
        };
        let b = block(cfg);
        let x: Vec<f64> = (0..28).map(|i| (i as f64).sin()).collect();
        let y = b.forward(&x, 7).unwrap();
        for c in 0..4 {
            let seq: Vec<f64> = (0..7).map(|k| x[k * 4 + c]).collect();
            let want = scan_recurrent(&b.channel_system(c).unwrap(), &seq).unwrap();
            for k in 0..7 {
                assert!((y[k * 4 + c] - (want[k] + x[k * 4 + c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn counts_steps_per_direction() {
        let c = Counters::new();
        block(BlockConfig::default()).forward_counted(&[0.1; 36], 9, &c).unwrap();
        let s = c.snapshot();
        assert_eq!((s.ssm_forward_steps, s.ssm_backward_steps), (9, 9));
    }

    #[test]
    fn rejects_bad_shapes() {
        let b = block(BlockConfig::default());
        assert!(matches!(b.forward(&[0.0; 7], 2), Err(Error::DimensionMismatch(_))));
        assert!(matches!(b.forward(&[], 0), Err(Error::EmptySequence)));
        assert!(b.forward(&[f64::NAN; 4], 1).is_err());
    }

    #[test]
    fn flags_round_trip() {
        for bits in 0..16 {
            assert_eq!(BlockConfig::from_flags(bits).unwrap().flags(), bits);
        }
        assert!(BlockConfig::from_flags(16).is_err());
    }
}
