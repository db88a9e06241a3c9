//! Connectionist temporal classification: alignment-free sequence loss and
//! greedy decoding for the text recognizer.
//!
//! The recognizer emits a short sequence of per-timestep class logits and
//! the loss marginalizes over every emission path — every alignment — that
//! collapses to the target transcript: repeated symbols merge and blanks
//! drop. The forward algorithm below runs in log space over the
//! blank-interleaved state sequence `[ε, l₁, ε, l₂, …, ε]`, entirely on
//! tensors so gradients flow back to the logits.

use candle_core::{D, Tensor};
use candle_nn::ops::log_softmax;

use crate::corpus::{char_class, class_char, validate_transcript, CHARSET_LEN};
use crate::error::{Error, Result};

/// Class count the recognizer head emits: one blank plus the 36-way charset.
pub const CTC_CLASSES: usize = CHARSET_LEN + 1;

/// Reserved blank class index.
pub const BLANK: usize = 0;

/// Additive stand-in for log(0). Large enough that `exp(x - max)` underflows
/// to exactly zero against any reachable log probability, small enough that
/// accumulating it over every timestep stays finite in float32.
const NEG_INF: f64 = -1e30;

/// Maps a transcript onto CTC label ids (charset class + 1; 0 is blank).
pub fn transcript_labels(text: &str) -> Result<Vec<usize>> {
    validate_transcript(text)?;
    Ok(text
        .chars()
        .map(|c| char_class(c).expect("validated transcript") + 1)
        .collect())
}

/// Shortest emission length that can collapse to `labels`: one step per
/// label plus one separating blank per adjacent repeat.
pub fn min_timesteps(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

/// Mean negative log likelihood of `labels` under logits `(B, T, C)`.
///
/// Label values must lie in `1..C`; class 0 is the blank. Returns a
/// validation error when a label sequence is empty, out of range, or needs
/// more than `T` timesteps (e.g. "aa" cannot be emitted in two steps — the
/// repeat requires a separating blank).
pub fn ctc_loss_with_labels(logits: &Tensor, labels: &[Vec<usize>]) -> Result<Tensor> {
    let (b, t, c) = logits.dims3()?;
    if labels.len() != b {
        return Err(Error::validation(format!(
            "batch has {b} logit rows but {} label sequences",
            labels.len()
        )));
    }
    let mut s_max = 0;
    for seq in labels {
        if seq.is_empty() {
            return Err(Error::validation("CTC target is empty"));
        }
        if let Some(&bad) = seq.iter().find(|&&l| l == BLANK || l >= c) {
            return Err(Error::validation(format!(
                "label {bad} outside the valid range 1..{c}"
            )));
        }
        let need = min_timesteps(seq);
        if need > t {
            return Err(Error::validation(format!(
                "target of length {} with repeats needs {need} timesteps, got {t}",
                seq.len()
            )));
        }
        s_max = s_max.max(2 * seq.len() + 1);
    }

    let device = logits.device();
    let dtype = logits.dtype();
    let lp = log_softmax(logits, D::Minus1)?; // (B, T, C)

    // Per-batch state tables, padded to s_max states. `state_hot` selects
    // each state's class from the log-probability rows; `skip` allows the
    // α(t-1, s-2) transition only onto a non-blank state that differs from
    // the state two back; `finals` marks the two states an alignment may
    // end in. Padding states never receive probability mass: their init and
    // skip entries stay blocked and the plain/shift-1 transitions can only
    // reach them from other padding states.
    let mut state_hot = vec![0f32; b * s_max * c];
    let mut skip = vec![NEG_INF as f32; b * s_max];
    let mut init = vec![NEG_INF as f32; b * s_max];
    let mut finals = vec![NEG_INF as f32; b * s_max];
    let mut pad = vec![NEG_INF as f32; b * s_max];
    for (i, seq) in labels.iter().enumerate() {
        let s_len = 2 * seq.len() + 1;
        let class_of = |s: usize| if s.is_multiple_of(2) { BLANK } else { seq[s / 2] };
        for s in 0..s_len {
            state_hot[(i * s_max + s) * c + class_of(s)] = 1.0;
            pad[i * s_max + s] = 0.0;
            if s >= 2 && class_of(s) != BLANK && class_of(s) != class_of(s - 2) {
                skip[i * s_max + s] = 0.0;
            }
        }
        init[i * s_max] = 0.0;
        init[i * s_max + 1] = 0.0;
        finals[i * s_max + s_len - 1] = 0.0;
        finals[i * s_max + s_len - 2] = 0.0;
    }
    let to_tensor = |v: Vec<f32>, dims: &[usize]| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, dims, device)?.to_dtype(dtype)?)
    };
    let state_hot = to_tensor(state_hot, &[b, s_max, c])?;
    let skip = to_tensor(skip, &[b, s_max])?;
    let init = to_tensor(init, &[b, s_max])?;
    let finals = to_tensor(finals, &[b, s_max])?;
    let pad = to_tensor(pad, &[b, s_max])?;

    // Log probability of each state's class at timestep t: (B, S).
    let state_lp = |t: usize| -> Result<Tensor> {
        let lp_t = lp.narrow(1, t, 1)?.transpose(1, 2)?; // (B, C, 1)
        Ok(state_hot.matmul(&lp_t)?.squeeze(2)?.add(&pad)?)
    };
    let block = |width: usize| Tensor::full(NEG_INF, (b, width), device)?.to_dtype(dtype);

    let mut alpha = init.add(&state_lp(0)?)?; // (B, S)
    for step in 1..t {
        let stay = alpha.clone();
        let advance = Tensor::cat(&[&block(1)?, &alpha.narrow(1, 0, s_max - 1)?], 1)?;
        let jump = if s_max >= 3 {
            Tensor::cat(&[&block(2)?, &alpha.narrow(1, 0, s_max - 2)?], 1)?.add(&skip)?
        } else {
            block(s_max)?
        };
        alpha = logsumexp_stack(&[stay, advance, jump])?.add(&state_lp(step)?)?;
    }

    let total = logsumexp_stack(&[alpha.add(&finals)?])?; // fold states per batch
    let per_sample = total.neg()?;
    Ok(per_sample.mean(0)?)
}

/// [`ctc_loss_with_labels`] over charset transcripts; `logits` must be
/// `(B, T, 37)` — blank plus the rendering charset.
pub fn ctc_loss(logits: &Tensor, transcripts: &[&str]) -> Result<Tensor> {
    let (_, _, c) = logits.dims3()?;
    if c != CTC_CLASSES {
        return Err(Error::validation(format!(
            "transcript loss expects {CTC_CLASSES} classes (blank + charset), got {c}"
        )));
    }
    let labels = transcripts
        .iter()
        .map(|t| transcript_labels(t))
        .collect::<Result<Vec<_>>>()?;
    ctc_loss_with_labels(logits, &labels)
}

/// Log-sum-exp over the last axis after stacking; with a single entry this
/// reduces that entry's last axis. Max-shifted so blocked (`NEG_INF`) terms
/// underflow to an exact zero contribution.
fn logsumexp_stack(parts: &[Tensor]) -> Result<Tensor> {
    let stacked = if parts.len() == 1 {
        parts[0].clone()
    } else {
        Tensor::stack(parts, D::Minus1)?
    };
    let m = stacked.max_keepdim(D::Minus1)?.detach();
    let shifted = stacked.broadcast_sub(&m)?;
    let summed = shifted.exp()?.sum(D::Minus1)?;
    Ok(summed.log()?.add(&m.squeeze(D::Minus1)?)?)
}

/// Greedy CTC decode of one `(T, 37)` logit matrix: per-step argmax (ties
/// to the lowest class), collapse adjacent repeats, drop blanks.
pub fn ctc_greedy_decode(logits: &Tensor) -> Result<String> {
    let (t, c) = logits.dims2()?;
    if c != CTC_CLASSES {
        return Err(Error::validation(format!(
            "decode expects {CTC_CLASSES} classes, got {c}"
        )));
    }
    let rows = logits.to_dtype(candle_core::DType::F32)?.to_vec2::<f32>()?;
    let mut out = String::new();
    let mut prev = usize::MAX;
    for row in rows.iter().take(t) {
        let best = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Less).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(BLANK);
        if best != prev && best != BLANK {
            out.push(class_char(best - 1).expect("class within charset"));
        }
        prev = best;
    }
    Ok(out)
}

/// [`ctc_greedy_decode`] over a `(B, T, 37)` batch.
pub fn ctc_greedy_decode_batch(logits: &Tensor) -> Result<Vec<String>> {
    let (b, _, _) = logits.dims3()?;
    (0..b)
        .map(|i| ctc_greedy_decode(&logits.narrow(0, i, 1)?.squeeze(0)?))
        .collect()
}

/// Fraction of predictions that match their reference exactly after case
/// folding. Word-level: one pair counts once, right or wrong.
pub fn word_accuracy(predictions: &[String], references: &[String]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::validation(format!(
            "{} predictions against {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::validation("word accuracy over an empty set"));
    }
    let hits = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| p.to_lowercase() == r.to_lowercase())
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::Rng;

    use crate::util::fd::{assert_fd_reports, fd_check};
    use crate::util::rng::seeded_rng;

    fn device() -> Device {
        Device::Cpu
    }

    /// Reference loss: enumerate all C^T emission paths, collapse each, and
    /// sum the softmax path probabilities of those that hit the target.
    fn brute_force_loss(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
        let t = logits.len();
        let c = logits[0].len();
        let probs: Vec<Vec<f64>> = logits
            .iter()
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = exp.iter().sum();
                exp.iter().map(|e| e / z).collect()
            })
            .collect();
        let mut total = 0.0;
        let mut path = vec![0usize; t];
        loop {
            let mut collapsed = Vec::new();
            let mut prev = usize::MAX;
            for &cls in &path {
                if cls != prev && cls != BLANK {
                    collapsed.push(cls);
                }
                prev = cls;
            }
            if collapsed == labels {
                total += path
                    .iter()
                    .enumerate()
                    .map(|(step, &cls)| probs[step][cls])
                    .product::<f64>();
            }
            // odometer increment over the C^T path space
            let mut pos = 0;
            loop {
                if pos == t {
                    return -total.ln();
                }
                path[pos] += 1;
                if path[pos] < c {
                    break;
                }
                path[pos] = 0;
                pos += 1;
            }
        }
    }

    fn loss_value(logits_rows: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let t = logits_rows.len();
        let c = logits_rows[0].len();
        let flat: Vec<f64> = logits_rows.iter().flatten().copied().collect();
        let tensor = Tensor::from_vec(flat, (1, t, c), &device())?;
        let loss = ctc_loss_with_labels(&tensor, &[labels.to_vec()])?;
        Ok(loss.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }

    #[test]
    fn transcript_labels_offset_past_blank() {
        assert_eq!(transcript_labels("abz9").unwrap(), vec![1, 2, 26, 36]);
        assert!(transcript_labels("").is_err());
        assert!(transcript_labels("a b").is_err());
    }

    #[test]
    fn min_timesteps_counts_repeat_separators() {
        assert_eq!(min_timesteps(&[1, 2, 3]), 3);
        assert_eq!(min_timesteps(&[1, 1]), 3);
        assert_eq!(min_timesteps(&[1, 1, 1]), 5);
        assert_eq!(min_timesteps(&[1, 1, 2, 2]), 6);
    }

    #[test]
    fn certain_single_frame_has_near_zero_loss() {
        // One timestep whose softmax is ~1 on the single target label.
        let mut row = vec![-30.0; CTC_CLASSES];
        row[1] = 30.0;
        let loss = loss_value(&[row], &[1]).unwrap();
        assert!(loss.abs() < 1e-3, "certain frame should cost ~0, got {loss}");
    }

    #[test]
    fn uniform_logits_match_counting_argument() {
        // With uniform logits every path has probability (1/C)^T, so the
        // loss is -ln(#valid · C^-T). T=2, C=2, target [1]: the three
        // paths [1,1], [1,ε], [ε,1] collapse to the target.
        let rows = vec![vec![0.0; 2]; 2];
        let loss = loss_value(&rows, &[1]).unwrap();
        let expected = -(3.0 * 0.25f64).ln();
        assert!(
            (loss - expected).abs() < 1e-9,
            "uniform loss {loss} vs counted {expected}"
        );
    }

    #[test]
    fn matches_brute_force_enumeration() {
        // Random logits across every feasible target over a 3-symbol
        // alphabet and T ≤ 4 timesteps.
        let mut rng = seeded_rng(71, "ctc-brute", &[]);
        let c = 4; // blank + 3 symbols
        let mut targets: Vec<Vec<usize>> = Vec::new();
        for len in 1..=4usize {
            let mut seq = vec![1usize; len];
            loop {
                targets.push(seq.clone());
                let mut pos = 0;
                loop {
                    if pos == len {
                        break;
                    }
                    seq[pos] += 1;
                    if seq[pos] < c {
                        break;
                    }
                    seq[pos] = 1;
                    pos += 1;
                }
                if pos == len {
                    break;
                }
            }
        }
        let mut checked = 0;
        for t in 1..=4usize {
            for target in &targets {
                if min_timesteps(target) > t {
                    continue;
                }
                let rows: Vec<Vec<f64>> = (0..t)
                    .map(|_| (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect();
                let got = loss_value(&rows, target).unwrap();
                let want = brute_force_loss(&rows, target);
                let rel = (got - want).abs() / want.abs().max(1e-12);
                assert!(
                    rel < 1e-6,
                    "T={t} target {target:?}: dp {got} vs enumeration {want} (rel {rel:.2e})"
                );
                checked += 1;
            }
        }
        // 3 + 9 + 24 + 60 feasible (T, target) combinations over the sweep.
        assert_eq!(checked, 96, "feasible case count drifted");
    }

    #[test]
    fn infeasible_targets_are_rejected() {
        let rows = vec![vec![0.0; CTC_CLASSES]; 2];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let logits = Tensor::from_vec(flat, (1, 2, CTC_CLASSES), &device()).unwrap();
        // "aa" needs three steps: a, separating blank, a.
        let err = ctc_loss(&logits, &["aa"]).unwrap_err().to_string();
        assert!(err.contains("timesteps"), "unexpected message: {err}");
        assert!(ctc_loss_with_labels(&logits, &[vec![]]).is_err());
        assert!(ctc_loss_with_labels(&logits, &[vec![0]]).is_err());
        assert!(ctc_loss_with_labels(&logits, &[vec![CTC_CLASSES]]).is_err());
        assert!(ctc_loss_with_labels(&logits, &[vec![1], vec![1]]).is_err());
    }

    #[test]
    fn batch_loss_is_mean_of_singles() {
        let mut rng = seeded_rng(5, "ctc-batch", &[]);
        let (t, c) = (6, CTC_CLASSES);
        let targets = [vec![1, 2], vec![3, 3], vec![4, 5, 6]];
        let rows: Vec<Vec<Vec<f64>>> = (0..targets.len())
            .map(|_| {
                (0..t)
                    .map(|_| (0..c).map(|_| rng.gen_range(-1.5..1.5)).collect())
                    .collect()
            })
            .collect();
        let singles: Vec<f64> = rows
            .iter()
            .zip(&targets)
            .map(|(r, l)| loss_value(r, l).unwrap())
            .collect();
        let flat: Vec<f64> = rows.iter().flatten().flatten().copied().collect();
        let batch = Tensor::from_vec(flat, (3, t, c), &device()).unwrap();
        let got = ctc_loss_with_labels(&batch, &targets)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let want = singles.iter().sum::<f64>() / 3.0;
        assert!(
            (got - want).abs() < 1e-9,
            "batch mean {got} vs singles {want}"
        );
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(9, "ctc-fd", &[]);
        let (t, c) = (4, 4);
        let data: Vec<f64> = (0..t * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var = Var::from_vec(data, (1, t, c), &device()).unwrap();
        let labels = vec![vec![1, 2, 1]];
        let loss = ctc_loss_with_labels(var.as_tensor(), &labels).unwrap();
        let grads = loss.backward().unwrap();
        let reports = fd_check(
            &[("logits".to_string(), var.clone())],
            &grads,
            || {
                ctc_loss_with_labels(var.as_tensor(), &labels)?
                    .to_scalar::<f64>()
                    .map_err(Into::into)
            },
            1e-4,
            16,
        )
        .unwrap();
        assert_fd_reports(&reports, 1e-6);
    }

    fn one_hot_logits(path: &[usize]) -> Tensor {
        let mut flat = vec![-10f32; path.len() * CTC_CLASSES];
        for (step, &cls) in path.iter().enumerate() {
            flat[step * CTC_CLASSES + cls] = 10.0;
        }
        Tensor::from_vec(flat, (path.len(), CTC_CLASSES), &device()).unwrap()
    }

    #[test]
    fn greedy_decode_collapses_and_drops_blanks() {
        // a a ε b → "ab"
        let logits = one_hot_logits(&[1, 1, BLANK, 2]);
        assert_eq!(ctc_greedy_decode(&logits).unwrap(), "ab");
        // all blanks → empty string
        let logits = one_hot_logits(&[BLANK; 5]);
        assert_eq!(ctc_greedy_decode(&logits).unwrap(), "");
        // a ε a keeps both a's
        let logits = one_hot_logits(&[1, BLANK, 1]);
        assert_eq!(ctc_greedy_decode(&logits).unwrap(), "aa");
        // ties argmax to the lowest class: uniform row decodes as blank
        let uniform = Tensor::zeros((1, CTC_CLASSES), DType::F32, &device()).unwrap();
        assert_eq!(ctc_greedy_decode(&uniform).unwrap(), "");
    }

    #[test]
    fn greedy_decode_matches_independent_collapse() {
        // Random argmax paths checked against a fold-style collapse that
        // shares no code with the decoder.
        let mut rng = seeded_rng(13, "ctc-decode", &[]);
        for case in 0..200 {
            let t = rng.gen_range(1..=12);
            let path: Vec<usize> = (0..t).map(|_| rng.gen_range(0..CTC_CLASSES)).collect();
            let want: String = path
                .iter()
                .fold((String::new(), usize::MAX), |(mut acc, prev), &cls| {
                    if cls != prev && cls != BLANK {
                        acc.push(class_char(cls - 1).unwrap());
                    }
                    (acc, cls)
                })
                .0;
            let got = ctc_greedy_decode(&one_hot_logits(&path)).unwrap();
            assert_eq!(got, want, "case {case} path {path:?}");
        }
    }

    #[test]
    fn one_hot_alignment_round_trips_through_decode() {
        for word in ["lego", "aa", "noon", "q", "z00m"] {
            let labels = transcript_labels(word).unwrap();
            // Explicit valid alignment: blank between repeated labels.
            let mut path = Vec::new();
            for (i, &l) in labels.iter().enumerate() {
                if i > 0 && labels[i - 1] == l {
                    path.push(BLANK);
                }
                path.push(l);
            }
            let decoded = ctc_greedy_decode(&one_hot_logits(&path)).unwrap();
            assert_eq!(decoded, word);
        }
    }

    #[test]
    fn decode_batch_matches_per_row_decode() {
        let mut rng = seeded_rng(3, "ctc-batch-decode", &[]);
        let flat: Vec<f32> = (0..4 * 6 * CTC_CLASSES)
            .map(|_| rng.gen_range(-3.0f32..3.0))
            .collect();
        let logits = Tensor::from_vec(flat, (4, 6, CTC_CLASSES), &device()).unwrap();
        let batch = ctc_greedy_decode_batch(&logits).unwrap();
        for i in 0..4 {
            let row = logits.narrow(0, i, 1).unwrap().squeeze(0).unwrap();
            assert_eq!(batch[i], ctc_greedy_decode(&row).unwrap());
        }
    }

    #[test]
    fn word_accuracy_counts_case_folded_matches() {
        let preds = vec!["lego".into(), "WORLD".into(), "cat".into(), "dg".into()];
        let refs = vec!["lego".into(), "world".into(), "cat".into(), "dog".into()];
        let acc = word_accuracy(&preds, &refs).unwrap();
        assert!((acc - 0.75).abs() < 1e-12);
        assert!(word_accuracy(&preds, &refs[..3].to_vec()).is_err());
        assert!(word_accuracy(&[], &[]).is_err());
    }
}
