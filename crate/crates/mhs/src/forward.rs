//! End-to-end forward pass: per-head subspace projection, multi-route
//! scanning through the head's sequence block, section fusion, channel
//! concatenation, layer normalization, and the optional tail projection.
//!
//! External layout is channel-last [B, H, W, C]; internally everything is
//! staged channel-first so the per-head work is plain matrix products and
//! grid gathers. Heads run in parallel; each head's arithmetic has a fixed
//! evaluation order and the heads are reassembled in index order, so output
//! bits never depend on the thread count.

use crate::config::MhsConfig;
use crate::error::{Error, Result};
use crate::esf::{coefficient_variation, EsfScheme, SectionStack};
use crate::routes::{
    build_route, gather_sequence, scatter_section, GridShape, RouteVariant, ScanPattern,
};
use crate::ssm::{mamba_block, MambaWeights};
use crate::tensor::Tensor;
use crate::weights::MhsWeights;
use rayon::prelude::*;
use serde::Serialize;

/// Normalization epsilon over the fused channel axis.
pub const LN_EPS: f64 = 1e-5;

/// Per-head observation of one forward pass.
#[derive(Debug, Clone, Serialize)]
pub struct HeadStats {
    pub pattern: ScanPattern,
    /// L2 norm of each route's section, route index order.
    pub section_norms: Vec<f64>,
    /// Fraction of fused positions whose variation gate evaluates to zero.
    /// Schemes without a gate report 0.
    pub gate_zero_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForwardStats {
    pub heads: Vec<HeadStats>,
}

/// Run the module on a channel-last input [B, H, W, C_l]. The output grid
/// matches the input; the channel count is C_l with the tail projection on,
/// n * S without it (equal by config validation).
pub fn forward(x: &Tensor, weights: &MhsWeights, config: &MhsConfig) -> Result<Tensor> {
    Ok(run(x, weights, config, false)?.0)
}

/// `forward` plus per-head section norms and gate summaries.
pub fn forward_with_stats(
    x: &Tensor,
    weights: &MhsWeights,
    config: &MhsConfig,
) -> Result<(Tensor, ForwardStats)> {
    let (y, stats) = run(x, weights, config, true)?;
    Ok((y, stats.expect("stats requested")))
}

/// The n fused per-head sections, each [B, S, H*W] in canonical cell order,
/// before concatenation and normalization.
pub fn fused_sections(x: &Tensor, weights: &MhsWeights, config: &MhsConfig) -> Result<Vec<Tensor>> {
    let staged = Staged::prepare(x, weights, config)?;
    let heads = staged.run_heads(false)?;
    Ok(heads.into_iter().map(|(fused, _)| fused).collect())
}

/// The n per-head stacks of route sections, before fusion. Exposed for
/// diagnostics and for regularity checks around the fusion nonlinearities.
pub fn head_stacks(
    x: &Tensor,
    weights: &MhsWeights,
    config: &MhsConfig,
) -> Result<Vec<SectionStack>> {
    let staged = Staged::prepare(x, weights, config)?;
    (0..config.n_heads)
        .map(|h| {
            let sections = staged.head_sections(
                &staged.weights.head_proj[h],
                &staged.weights.mamba[h],
                staged.patterns[h],
            )?;
            SectionStack::from_sections(&sections)
        })
        .collect()
}

struct Staged<'a> {
    weights: &'a MhsWeights,
    config: &'a MhsConfig,
    grid: GridShape,
    batch: usize,
    /// [B, C_l, H*W] staging of the input.
    x_cf: Tensor,
    scheme: EsfScheme,
    patterns: Vec<ScanPattern>,
}

impl<'a> Staged<'a> {
    fn prepare(x: &Tensor, weights: &'a MhsWeights, config: &'a MhsConfig) -> Result<Self> {
        config.validate()?;
        weights.validate(config)?;
        let shape = x.shape();
        if shape.len() != 4 || shape[3] != config.c_l {
            return Err(Error::dim("forward", shape, &[config.c_l]));
        }
        let grid = GridShape::new(shape[1], shape[2])?;
        if !x.is_finite() {
            return Err(Error::Domain("forward input has non-finite values".into()));
        }
        let (batch, hw, c_l) = (shape[0], grid.len(), config.c_l);
        let mut cf = vec![0.0f64; batch * c_l * hw];
        let xd = x.data();
        for b in 0..batch {
            for p in 0..hw {
                let src = (b * hw + p) * c_l;
                for c in 0..c_l {
                    cf[(b * c_l + c) * hw + p] = xd[src + c];
                }
            }
        }
        let mut scheme = config.esf.scheme();
        if let Some(w) = &weights.esf_w {
            scheme = scheme.with_pool_weights(w);
        }
        Ok(Staged {
            weights,
            config,
            grid,
            batch,
            x_cf: Tensor::new([batch, c_l, hw], cf)?,
            scheme,
            patterns: config.pattern_assignment()?,
        })
    }

    fn run_heads(&self, want_stats: bool) -> Result<Vec<(Tensor, Option<HeadStats>)>> {
        (0..self.config.n_heads)
            .into_par_iter()
            .map(|h| {
                self.run_head(
                    &self.weights.head_proj[h],
                    &self.weights.mamba[h],
                    self.patterns[h],
                    want_stats,
                )
            })
            .collect()
    }

    fn head_sections(
        &self,
        proj: &Tensor,
        mamba: &MambaWeights,
        pattern: ScanPattern,
    ) -> Result<Vec<Tensor>> {
        let (s, c_l, hw) = (self.config.subspace_dim, self.config.c_l, self.grid.len());
        let mut sub = Vec::with_capacity(self.batch * s * hw);
        for b in 0..self.batch {
            let plane = Tensor::new(
                [c_l, hw],
                self.x_cf.data()[b * c_l * hw..(b + 1) * c_l * hw].to_vec(),
            )?;
            sub.extend_from_slice(proj.matmul(&plane)?.data());
        }
        let sub_grid = Tensor::new([self.batch, s, self.grid.h, self.grid.w], sub)?;

        let mut sections = Vec::with_capacity(self.config.k_routes);
        for v in 0..self.config.k_routes {
            let route = build_route(pattern, RouteVariant::new(v as u8)?, self.grid);
            let seq = gather_sequence(&sub_grid, &route)?;
            let scanned = mamba_block(&seq, mamba)?;
            sections.push(scatter_section(&scanned, &route)?);
        }
        Ok(sections)
    }

    fn run_head(
        &self,
        proj: &Tensor,
        mamba: &MambaWeights,
        pattern: ScanPattern,
        want_stats: bool,
    ) -> Result<(Tensor, Option<HeadStats>)> {
        let sections = self.head_sections(proj, mamba, pattern)?;
        let stack = SectionStack::from_sections(&sections)?;
        let fused = self.scheme.fuse(&stack)?;

        let stats = if want_stats {
            let section_norms = sections
                .iter()
                .map(|sec| sec.data().iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect();
            let gate_zero_fraction = match &self.scheme {
                EsfScheme::CvScaling { t, eps, gate }
                | EsfScheme::MixPoolCv { t, eps, gate, .. } => {
                    let cv = coefficient_variation(&stack, *eps)?;
                    let zeros = cv
                        .data()
                        .iter()
                        .filter(|&&c| gate.apply(c, *t) == 0.0)
                        .count();
                    zeros as f64 / cv.len() as f64
                }
                _ => 0.0,
            };
            Some(HeadStats {
                pattern,
                section_norms,
                gate_zero_fraction,
            })
        } else {
            None
        };
        Ok((fused, stats))
    }
}

fn run(
    x: &Tensor,
    weights: &MhsWeights,
    config: &MhsConfig,
    want_stats: bool,
) -> Result<(Tensor, Option<ForwardStats>)> {
    let staged = Staged::prepare(x, weights, config)?;
    let heads = staged.run_heads(want_stats)?;
    let (batch, hw) = (staged.batch, staged.grid.len());
    let (s, fused_c) = (config.subspace_dim, config.fused_channels());

    let mut cat = Vec::with_capacity(batch * fused_c * hw);
    for b in 0..batch {
        for (fused, _) in &heads {
            cat.extend_from_slice(&fused.data()[b * s * hw..(b + 1) * s * hw]);
        }
    }
    let cat = Tensor::new([batch, fused_c, hw], cat)?;
    let normed = cat.layer_norm(1, &weights.ln_gamma, &weights.ln_beta, LN_EPS)?;

    let (projected, c_out) = match &weights.tail_proj {
        Some(tail) => {
            let mut out = Vec::with_capacity(batch * config.c_l * hw);
            for b in 0..batch {
                let plane = Tensor::new(
                    [fused_c, hw],
                    normed.data()[b * fused_c * hw..(b + 1) * fused_c * hw].to_vec(),
                )?;
                out.extend_from_slice(tail.matmul(&plane)?.data());
            }
            (Tensor::new([batch, config.c_l, hw], out)?, config.c_l)
        }
        None => (normed, fused_c),
    };

    let pd = projected.data();
    let mut out = vec![0.0f64; batch * hw * c_out];
    for b in 0..batch {
        for p in 0..hw {
            let dst = (b * hw + p) * c_out;
            for c in 0..c_out {
                out[dst + c] = pd[(b * c_out + c) * hw + p];
            }
        }
    }
    let y = Tensor::new([batch, staged.grid.h, staged.grid.w, c_out], out)?;
    let stats = want_stats.then(|| ForwardStats {
        heads: heads
            .into_iter()
            .map(|(_, s)| s.expect("stats requested"))
            .collect(),
    });
    Ok((y, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EsfSchemeName, EsfSettings, MhsConfig};
    use crate::weights::init_weights;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seeded_input(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = shape.iter().product();
        Tensor::new(
            shape,
            (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn tiny(n_heads: usize, subspace_dim: usize, tail: bool) -> MhsConfig {
        MhsConfig {
            c_l: 12,
            n_heads,
            subspace_dim,
            tail_projection: tail,
            patterns: None,
            ..MhsConfig::default()
        }
    }

    #[test]
    fn output_grid_matches_input_across_head_splits() {
        for config in [
            tiny(3, 4, true),
            tiny(4, 3, true),
            tiny(4, 4, true),
            tiny(3, 4, false),
        ] {
            let weights = init_weights(&config, 3).unwrap();
            for (h, w) in [(1, 1), (2, 3), (4, 4), (5, 2)] {
                let x = seeded_input([2, h, w, 12], 7);
                let y = forward(&x, &weights, &config).unwrap();
                assert_eq!(y.shape(), &[2, h, w, 12]);
                assert!(y.is_finite());
            }
        }
    }

    #[test]
    fn zero_input_stays_exactly_zero() {
        let config = tiny(3, 4, true);
        let weights = init_weights(&config, 0).unwrap();
        let x = Tensor::zeros([1, 3, 3, 12]);
        let y = forward(&x, &weights, &config).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroing_a_head_projection_silences_only_that_head() {
        let config = tiny(3, 4, true);
        let weights = init_weights(&config, 11).unwrap();
        let x = seeded_input([1, 4, 3, 12], 13);
        let base = fused_sections(&x, &weights, &config).unwrap();

        let mut silenced = weights.clone();
        silenced.head_proj[1] = Tensor::zeros([4, 12]);
        let cut = fused_sections(&x, &silenced, &config).unwrap();

        assert!(cut[1].data().iter().all(|&v| v == 0.0));
        assert!(cut[0].bits_eq(&base[0]));
        assert!(cut[2].bits_eq(&base[2]));
        assert!(!base[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_route_sum_equals_hand_wired_pipeline() {
        let config = MhsConfig {
            c_l: 6,
            n_heads: 1,
            subspace_dim: 6,
            k_routes: 1,
            tail_projection: false,
            patterns: Some(vec![ScanPattern::Snake]),
            esf: EsfSettings {
                scheme: EsfSchemeName::Sum,
                ..Default::default()
            },
            ..MhsConfig::default()
        };
        let weights = init_weights(&config, 21).unwrap();
        let (h, w, c) = (3, 4, 6);
        let x = seeded_input([1, h, w, c], 23);

        let y = forward(&x, &weights, &config).unwrap();

        let hw = h * w;
        let mut cf = vec![0.0; c * hw];
        for p in 0..hw {
            for ch in 0..c {
                cf[ch * hw + p] = x.data()[p * c + ch];
            }
        }
        let plane = Tensor::new([c, hw], cf).unwrap();
        let sub = weights.head_proj[0].matmul(&plane).unwrap();
        let sub_grid = sub.reshape([1, c, h, w]).unwrap();
        let route = build_route(
            ScanPattern::Snake,
            RouteVariant::new(0).unwrap(),
            GridShape::new(h, w).unwrap(),
        );
        let seq = gather_sequence(&sub_grid, &route).unwrap();
        let scanned = mamba_block(&seq, &weights.mamba[0]).unwrap();
        let section = scatter_section(&scanned, &route).unwrap();
        let normed = section
            .layer_norm(1, &weights.ln_gamma, &weights.ln_beta, LN_EPS)
            .unwrap();
        let mut expect = vec![0.0; hw * c];
        for p in 0..hw {
            for ch in 0..c {
                expect[p * c + ch] = normed.data()[ch * hw + p];
            }
        }
        let expect = Tensor::new([1, h, w, c], expect).unwrap();
        assert!(y.bits_eq(&expect));
    }

    #[test]
    fn thread_count_never_changes_output_bits() {
        let config = tiny(4, 3, true);
        let weights = init_weights(&config, 31).unwrap();
        let x = seeded_input([2, 4, 4, 12], 33);
        let pool1 = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap();
        let y1 = pool1.install(|| forward(&x, &weights, &config)).unwrap();
        let y4 = pool4.install(|| forward(&x, &weights, &config)).unwrap();
        assert!(y1.bits_eq(&y4));
    }

    #[test]
    fn trivial_grid_closes_the_variation_gate() {
        // a 1x1 grid makes every route identical, so the gated schemes
        // screen the whole section out
        let config = tiny(3, 4, true);
        let weights = init_weights(&config, 41).unwrap();
        let x = seeded_input([1, 1, 1, 12], 43);
        let (y, stats) = forward_with_stats(&x, &weights, &config).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        for head in &stats.heads {
            assert_eq!(head.gate_zero_fraction, 1.0);
            assert_eq!(head.section_norms.len(), 4);
        }
    }

    #[test]
    fn stats_report_norms_per_route() {
        let config = tiny(3, 4, true);
        let weights = init_weights(&config, 51).unwrap();
        let x = seeded_input([1, 3, 3, 12], 53);
        let (_, stats) = forward_with_stats(&x, &weights, &config).unwrap();
        assert_eq!(stats.heads.len(), 3);
        for head in &stats.heads {
            assert_eq!(head.section_norms.len(), config.k_routes);
            assert!(head.section_norms.iter().all(|&n| n > 0.0));
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let config = tiny(3, 4, true);
        let weights = init_weights(&config, 61).unwrap();

        let wrong_channels = Tensor::zeros([1, 2, 2, 7]);
        assert!(matches!(
            forward(&wrong_channels, &weights, &config).unwrap_err(),
            Error::Dim { .. }
        ));

        let mut bad = Tensor::zeros([1, 2, 2, 12]);
        bad.data_mut()[5] = f64::NAN;
        assert!(matches!(
            forward(&bad, &weights, &config).unwrap_err(),
            Error::Domain(_)
        ));

        let other = tiny(4, 3, true);
        let x = Tensor::zeros([1, 2, 2, 12]);
        assert!(matches!(
            forward(&x, &weights, &other).unwrap_err(),
            Error::Validation(_)
        ));
    }
}
