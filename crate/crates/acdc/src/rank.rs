//! Cross-layer coefficient alignment and effective-rank analysis.
//!
//! For every pair of decomposed layers, atom responses Z and layer outputs Y
//! are matched by CCA, the coefficient matrices are expressed in the shared
//! bases, and the effective rank of each single matrix is compared against
//! the rank of the pair stacked vertically. Stacked rank close to the single
//! ranks means the layers reuse one coefficient subspace; additive rank
//! means they do not.

use crate::cca::{aligned_coefficients, cca_align, effective_rank, vstack, RankMode};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ExecMode, Model};
use crate::scalar::Scalar;
use nalgebra::DMatrix;

/// Activation matrices for one decomposed layer: columns are sampled
/// (image, position) observations.
#[derive(Debug, Clone)]
pub struct ActivationSample {
    pub layer: usize,
    pub desc: usize,
    pub label: String,
    /// Atom responses, (c_in * m) x n.
    pub z: DMatrix<f64>,
    /// Layer outputs, c_out x n.
    pub y: DMatrix<f64>,
}

/// Spatial sample grid: the 1/4, 1/2, 3/4 fractions of each output extent,
/// deduplicated for small maps.
fn grid_positions(extent: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [1, 2, 3]
        .iter()
        .map(|&k| (extent * k / 4).min(extent - 1))
        .collect();
    out.dedup();
    out
}

fn require_unshared<T: Scalar>(model: &Model<T>) -> Result<()> {
    let mut decomposed = 0;
    for binding in model.alloc.bindings.iter().flatten() {
        decomposed += 1;
        if binding.g != 1 {
            return Err(Error::config(
                "rank analysis requires ungrouped layers (g = 1 everywhere)",
            ));
        }
        if model.alloc.scopes[binding.scope].members.len() != 1 {
            return Err(Error::config(
                "rank analysis requires per-layer coefficients, not a shared scope",
            ));
        }
    }
    if decomposed < 2 {
        return Err(Error::config(
            "rank analysis needs at least two decomposed layers",
        ));
    }
    Ok(())
}

/// Runs the model over `ds` in inference mode and gathers per-layer Z and Y
/// observations on a 3x3 normalized grid of spatial positions.
pub fn collect_activations<T: Scalar>(
    model: &mut Model<T>,
    ds: &Dataset,
    batch: usize,
) -> Result<Vec<ActivationSample>> {
    require_unshared(model)?;
    if ds.is_empty() {
        return Err(Error::config("activation collection needs a non-empty dataset"));
    }
    if batch == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }

    let saved_exec = model.exec;
    model.exec = ExecMode::SubLayer;
    let result = collect_inner(model, ds, batch);
    model.exec = saved_exec;
    result
}

fn collect_inner<T: Scalar>(
    model: &mut Model<T>,
    ds: &Dataset,
    batch: usize,
) -> Result<Vec<ActivationSample>> {
    struct Acc {
        layer: usize,
        desc: usize,
        label: String,
        z_rows: usize,
        y_rows: usize,
        z: Vec<f64>,
        y: Vec<f64>,
        cols: usize,
    }
    let mut accs: Vec<Acc> = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();

    for chunk in idx.chunks(batch) {
        let (x, _) = ds.batch::<T>(chunk);
        let mut tape = crate::autograd::Tape::new();
        let x = tape.constant(x);
        let out = model.forward(&mut tape, x, false, None)?;

        for (t, tap) in out.taps.iter().enumerate() {
            let z = tape.value(tap.z_groups[0]);
            let y = tape.value(tap.y);
            let (&[b, zc, oh, ow],) = (&z.shape()[..],) else {
                return Err(Error::numeric("unexpected atom response shape"));
            };
            let yc = y.shape()[1];
            if accs.len() <= t {
                let desc = tap.desc;
                accs.push(Acc {
                    layer: tap.layer,
                    desc,
                    label: model.resolved.descs[desc].label.clone(),
                    z_rows: zc,
                    y_rows: yc,
                    z: Vec::new(),
                    y: Vec::new(),
                    cols: 0,
                });
            }
            let acc = &mut accs[t];
            let rows = grid_positions(oh);
            let cols = grid_positions(ow);
            let zd = z.data();
            let yd = y.data();
            for img in 0..b {
                for &r in &rows {
                    for &c in &cols {
                        for ch in 0..zc {
                            acc.z.push(zd[((img * zc + ch) * oh + r) * ow + c].to_f64());
                        }
                        for ch in 0..yc {
                            acc.y.push(yd[((img * yc + ch) * oh + r) * ow + c].to_f64());
                        }
                        acc.cols += 1;
                    }
                }
            }
        }
    }

    Ok(accs
        .into_iter()
        .map(|a| ActivationSample {
            layer: a.layer,
            desc: a.desc,
            label: a.label,
            // Columns were appended channel-contiguous, which is exactly
            // column-major storage.
            z: DMatrix::from_vec(a.z_rows, a.cols, a.z),
            y: DMatrix::from_vec(a.y_rows, a.cols, a.y),
        })
        .collect())
}

/// Reads one layer's coefficient slice [c, c', m] as a c x (c'*m) matrix,
/// column index j*m + k for input channel j and atom k, matching the channel
/// order of the atom-response sub-layer.
pub fn coefficient_matrix<T: Scalar>(model: &Model<T>, desc_index: usize) -> Result<DMatrix<f64>> {
    let binding = model
        .alloc
        .binding_for_desc(desc_index)
        .ok_or_else(|| Error::config("layer is not decomposed"))?;
    let d = &model.resolved.descs[desc_index];
    let (c, cp) = binding.slice_dims(d);
    let scope = &model.alloc.scopes[binding.scope];
    let data = model.store.get(scope.coeff).data();
    let (cp_max, m) = (scope.cp_max, scope.m);
    Ok(DMatrix::from_fn(c, cp * m, |o, col| {
        let (j, k) = (col / m, col % m);
        data[(o * cp_max + j) * m + k].to_f64()
    }))
}

/// Ranks for one aligned layer pair under one rank mode.
#[derive(Debug, Clone)]
pub struct PairRank {
    pub layer_i: usize,
    pub layer_j: usize,
    pub single_i: f64,
    pub single_j: f64,
    pub concat: f64,
}

impl PairRank {
    pub fn avg_single(&self) -> f64 {
        0.5 * (self.single_i + self.single_j)
    }

    pub fn ratio(&self) -> f64 {
        self.concat / self.avg_single()
    }
}

/// Rank summary across all layer pairs for one rank mode.
#[derive(Debug, Clone)]
pub struct RankReport {
    pub mode: RankMode,
    pub n_observations: usize,
    pub pairs: Vec<PairRank>,
    pub avg_single: f64,
    pub avg_concat: f64,
    pub ratio_of_averages: f64,
}

/// Aligns every layer pair once and scores it under each requested rank
/// mode. Returns one report per mode, in the given order.
pub fn rank_experiment<T: Scalar>(
    model: &Model<T>,
    acts: &[ActivationSample],
    modes: &[RankMode],
) -> Result<Vec<RankReport>> {
    if acts.len() < 2 {
        return Err(Error::config(
            "rank analysis needs at least two decomposed layers",
        ));
    }
    let n_obs = acts[0].z.ncols();
    let coeffs: Vec<DMatrix<f64>> = acts
        .iter()
        .map(|a| coefficient_matrix(model, a.desc))
        .collect::<Result<_>>()?;

    let mut per_mode: Vec<Vec<PairRank>> = vec![Vec::new(); modes.len()];
    for i in 0..acts.len() {
        for j in i + 1..acts.len() {
            let rz = cca_align(&acts[i].z, &acts[j].z)?;
            let ry = cca_align(&acts[i].y, &acts[j].y)?;
            let ai = aligned_coefficients(&coeffs[i], &ry.p_i, &rz.p_i)?;
            let aj = aligned_coefficients(&coeffs[j], &ry.p_j, &rz.p_j)?;
            let stacked = vstack(&ai, &aj)?;
            for (mi, &mode) in modes.iter().enumerate() {
                per_mode[mi].push(PairRank {
                    layer_i: acts[i].layer,
                    layer_j: acts[j].layer,
                    single_i: effective_rank(&ai, mode),
                    single_j: effective_rank(&aj, mode),
                    concat: effective_rank(&stacked, mode),
                });
            }
        }
    }

    Ok(modes
        .iter()
        .zip(per_mode)
        .map(|(&mode, pairs)| {
            let n = pairs.len() as f64;
            let avg_single = pairs.iter().map(PairRank::avg_single).sum::<f64>() / n;
            let avg_concat = pairs.iter().map(|p| p.concat).sum::<f64>() / n;
            RankReport {
                mode,
                n_observations: n_obs,
                pairs,
                avg_single,
                avg_concat,
                ratio_of_averages: avg_concat / avg_single,
            }
        })
        .collect())
}

fn mode_name(mode: RankMode) -> String {
    match mode {
        RankMode::Entropy => "entropy".to_string(),
        RankMode::Threshold(t) => format!("threshold-{t}"),
    }
}

/// Column order: mode, kind, layer_i, layer_j, single_i, single_j, concat,
/// ratio. Pair rows carry one aligned pair; each mode ends with a summary
/// row holding the averages and the ratio of averages.
pub fn reports_to_csv(reports: &[RankReport]) -> String {
    let mut out = String::from("mode,kind,layer_i,layer_j,single_i,single_j,concat,ratio\n");
    for rep in reports {
        let mode = mode_name(rep.mode);
        for p in &rep.pairs {
            out.push_str(&format!(
                "{mode},pair,{},{},{:.6},{:.6},{:.6},{:.6}\n",
                p.layer_i,
                p.layer_j,
                p.single_i,
                p.single_j,
                p.concat,
                p.ratio()
            ));
        }
        out.push_str(&format!(
            "{mode},summary,,,{:.6},,{:.6},{:.6}\n",
            rep.avg_single, rep.avg_concat, rep.ratio_of_averages
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use crate::presets::preset;
    use crate::sharing::{SchemeKind, SharingScheme};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn unshared_toy(m: usize, seed: u64) -> Model<f64> {
        let config = preset("toy-4layer").unwrap();
        build_model(
            &config,
            SharingScheme {
                kind: SchemeKind::GroupedLayer,
                m,
                s: None,
            },
            seed,
        )
        .unwrap()
    }

    fn random_matrix(rng: &mut ChaCha20Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn synthetic_pair(
        ai: DMatrix<f64>,
        aj: DMatrix<f64>,
        zi: DMatrix<f64>,
        zj: DMatrix<f64>,
    ) -> (Vec<PairRank>, Vec<PairRank>) {
        let yi = &ai * &zi;
        let yj = &aj * &zj;
        let rz = cca_align(&zi, &zj).unwrap();
        let ry = cca_align(&yi, &yj).unwrap();
        let at_i = aligned_coefficients(&ai, &ry.p_i, &rz.p_i).unwrap();
        let at_j = aligned_coefficients(&aj, &ry.p_j, &rz.p_j).unwrap();
        let stacked = vstack(&at_i, &at_j).unwrap();
        let rank = |mode| PairRank {
            layer_i: 0,
            layer_j: 1,
            single_i: effective_rank(&at_i, mode),
            single_j: effective_rank(&at_j, mode),
            concat: effective_rank(&stacked, mode),
        };
        (
            vec![rank(RankMode::Entropy)],
            vec![rank(RankMode::Threshold(0.01))],
        )
    }

    #[test]
    fn identical_layers_have_ratio_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 4, 12);
        let z = random_matrix(&mut rng, 12, 600);
        let (ent, thr) = synthetic_pair(a.clone(), a, z.clone(), z);
        assert!((ent[0].ratio() - 1.0).abs() < 0.05, "{}", ent[0].ratio());
        assert!((thr[0].ratio() - 1.0).abs() < 1e-6, "{}", thr[0].ratio());
    }

    #[test]
    fn shared_subspace_after_invertible_mix_keeps_ratio_low() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 4, 12);
        let mix = DMatrix::identity(4, 4) * 0.8 + random_matrix(&mut rng, 4, 4) * 0.1;
        let z = random_matrix(&mut rng, 12, 600);
        let (_, thr) = synthetic_pair(a.clone(), &mix * &a, z.clone(), z);
        assert!(thr[0].ratio() < 1.2, "{}", thr[0].ratio());
    }

    #[test]
    fn independent_layers_have_additive_rank() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let ai = random_matrix(&mut rng, 4, 12);
        let aj = random_matrix(&mut rng, 4, 12);
        let zi = random_matrix(&mut rng, 12, 600);
        let zj = random_matrix(&mut rng, 12, 600);
        let (_, thr) = synthetic_pair(ai, aj, zi, zj);
        assert!(thr[0].ratio() > 1.7, "{}", thr[0].ratio());
    }

    #[test]
    fn collection_shapes_and_pair_count() {
        let mut model = unshared_toy(4, 7);
        let ds = crate::data::synthetic_digits(8, 1);
        let acts = collect_activations(&mut model, &ds, 4).unwrap();
        assert_eq!(acts.len(), 4);
        for a in &acts {
            assert_eq!(a.z.ncols(), 8 * 9);
            assert_eq!(a.y.ncols(), 8 * 9);
            assert_eq!(a.z.nrows(), 16 * 4);
            assert_eq!(a.y.nrows(), 16);
        }
        // 4 layers -> 6 unordered pairs.
        let more = crate::data::synthetic_digits(40, 2);
        let acts = collect_activations(&mut model, &more, 16).unwrap();
        let reports =
            rank_experiment(&model, &acts, &[RankMode::Entropy, RankMode::Threshold(0.01)])
                .unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].pairs.len(), 6);
        assert_eq!(reports[0].n_observations, 40 * 9);
        let csv = reports_to_csv(&reports);
        assert!(csv.starts_with("mode,kind,layer_i,layer_j,single_i,single_j,concat,ratio\n"));
        assert_eq!(csv.matches("summary").count(), 2);
    }

    #[test]
    fn shared_scope_rejected() {
        let config = preset("toy-4layer").unwrap();
        let mut model = build_model::<f64>(
            &config,
            SharingScheme {
                kind: SchemeKind::Net,
                m: 4,
                s: None,
            },
            7,
        )
        .unwrap();
        let ds = crate::data::synthetic_digits(8, 1);
        let err = collect_activations(&mut model, &ds, 4).unwrap_err();
        assert!(err.to_string().contains("shared scope"), "{err}");
    }

    #[test]
    fn coefficient_matrix_matches_storage_layout() {
        let model = unshared_toy(3, 5);
        let desc = model
            .alloc
            .bindings
            .iter()
            .position(|b| b.is_some())
            .unwrap();
        let a = coefficient_matrix(&model, desc).unwrap();
        let binding = model.alloc.binding_for_desc(desc).unwrap();
        let scope = &model.alloc.scopes[binding.scope];
        let data = model.store.get(scope.coeff).data();
        let d = &model.resolved.descs[desc];
        assert_eq!(a.nrows(), d.c_out);
        assert_eq!(a.ncols(), d.c_in * 3);
        assert_eq!(a[(2, 5)], data[(2 * scope.cp_max + 1) * 3 + 2]);
    }
}
