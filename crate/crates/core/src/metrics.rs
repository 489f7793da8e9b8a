//! Per-class IoU accumulated over a benchmark, and the timing harness.
//!
//! Counts are summed over every episode of a class before dividing, so a
//! class's IoU is `Σtp / (Σtp + Σfp + Σfn)`. The mean is unweighted over
//! classes; a class whose denominator is zero is left out and listed in
//! [`EvalReport::excluded`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::dataset::{BinaryMask, Episode};
use crate::predictor::Predictor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub episodes: u64,
}

impl Counts {
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    per_class: BTreeMap<u8, Counts>,
}

impl ClassCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, pred: &BinaryMask, gt: &BinaryMask, class_id: u8) -> Result<()> {
        if !pred.same_size(gt) {
            return Err(Error::shape(
                "accumulate",
                format!(
                    "prediction {}x{} vs ground truth {}x{}",
                    pred.width(),
                    pred.height(),
                    gt.width(),
                    gt.height()
                ),
            ));
        }
        let c = self.per_class.entry(class_id).or_default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                _ => {}
            }
        }
        c.episodes += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ClassCounts) {
        for (&class_id, o) in &other.per_class {
            let c = self.per_class.entry(class_id).or_default();
            c.tp += o.tp;
            c.fp += o.fp;
            c.fn_ += o.fn_;
            c.episodes += o.episodes;
        }
    }

    pub fn get(&self, class_id: u8) -> Option<&Counts> {
        self.per_class.get(&class_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &Counts)> {
        self.per_class.iter().map(|(&c, v)| (c, v))
    }

    /// Per-class IoU and their unweighted mean.
    pub fn finalize(&self) -> Result<Scores> {
        let classes: Vec<ClassScore> = self
            .per_class
            .iter()
            .map(|(&class_id, &counts)| ClassScore {
                class_id,
                counts,
                iou: counts.iou(),
            })
            .collect();
        let defined: Vec<f64> = classes.iter().filter_map(|c| c.iou).collect();
        if defined.is_empty() {
            return Err(Error::InvalidArgument(
                "no class has a non-zero IoU denominator".into(),
            ));
        }
        Ok(Scores {
            mean_iou: defined.iter().sum::<f64>() / defined.len() as f64,
            excluded: classes.iter().filter(|c| c.iou.is_none()).map(|c| c.class_id).collect(),
            classes,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassScore {
    pub class_id: u8,
    pub counts: Counts,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub classes: Vec<ClassScore>,
    pub mean_iou: f64,
    /// Classes with `tp + fp + fn = 0`.
    pub excluded: Vec<u8>,
}

/// Run parameters echoed into the report.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BenchmarkInfo {
    pub fold: usize,
    pub k: usize,
    pub seed: u64,
    pub manifest: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub predictor: String,
    pub info: BenchmarkInfo,
    pub episodes: usize,
    pub scores: Scores,
    pub seconds_per_episode: f64,
    /// Set when the predictor failed: the index of the failing episode and
    /// the error. Scores then cover only the episodes before it.
    pub failure: Option<(usize, String)>,
}

impl EvalReport {
    pub fn mean_iou(&self) -> f64 {
        self.scores.mean_iou
    }

    pub fn class_iou(&self, class_id: u8) -> Option<f64> {
        self.scores.classes.iter().find(|c| c.class_id == class_id).and_then(|c| c.iou)
    }

    /// CSV with one row per class and a final `mean` row. Wall-clock
    /// timing is deliberately left out so reruns compare byte-for-byte.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("predictor,fold,k,n,seed,class_id,episodes,tp,fp,fn,iou\n");
        let head = format!(
            "{},{},{},{},{}",
            self.predictor, self.info.fold, self.info.k, self.episodes, self.info.seed
        );
        for c in &self.scores.classes {
            let iou = c.iou.map(|v| format!("{v:.6}")).unwrap_or_else(|| "excluded".into());
            let _ = writeln!(
                out,
                "{head},{},{},{},{},{},{iou}",
                c.class_id, c.counts.episodes, c.counts.tp, c.counts.fp, c.counts.fn_
            );
        }
        let total = self.scores.classes.iter().fold(Counts::default(), |mut acc, c| {
            acc.tp += c.counts.tp;
            acc.fp += c.counts.fp;
            acc.fn_ += c.counts.fn_;
            acc.episodes += c.counts.episodes;
            acc
        });
        let _ = writeln!(
            out,
            "{head},mean,{},{},{},{},{:.6}",
            total.episodes, total.tp, total.fp, total.fn_, self.scores.mean_iou
        );
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{} | fold {} | k={} | N={} | seed {}\n",
            self.predictor, self.info.fold, self.info.k, self.episodes, self.info.seed
        );
        let _ = writeln!(out, "{:>8} {:>9} {:>8}", "class", "episodes", "IoU");
        for c in &self.scores.classes {
            let iou = c.iou.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(out, "{:>8} {:>9} {:>8}", c.class_id, c.counts.episodes, iou);
        }
        let _ = writeln!(out, "{:>8} {:>9} {:>8.4}", "mean", self.episodes, self.scores.mean_iou);
        let _ = writeln!(out, "mean seconds per episode: {:.4}", self.seconds_per_episode);
        if let Some(m) = &self.info.manifest {
            let _ = writeln!(out, "manifest: {m}");
        }
        if let Some((i, e)) = &self.failure {
            let _ = writeln!(out, "FAILED at episode {i}: {e}");
        }
        out
    }
}

/// Scores `predictor` on `episodes`. With `threads > 1` episodes are
/// predicted in parallel; counts are always merged in episode order.
pub fn run_benchmark(
    predictor: &dyn Predictor,
    episodes: &[Episode],
    info: BenchmarkInfo,
    threads: usize,
) -> Result<EvalReport> {
    if let Some(e) = episodes.iter().find(|e| e.k() != info.k) {
        return Err(Error::InvalidArgument(format!(
            "episode with k={} in a k={} benchmark",
            e.k(),
            info.k
        )));
    }
    let run_one = |e: &Episode| -> (Result<BinaryMask>, f64) {
        let start = Instant::now();
        let mask = predictor.predict(e);
        (mask, start.elapsed().as_secs_f64())
    };
    let results: Vec<(Result<BinaryMask>, f64)> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| episodes.par_iter().map(run_one).collect())
    } else {
        episodes.iter().map(run_one).collect()
    };

    let mut counts = ClassCounts::new();
    let mut failure = None;
    let mut seconds = 0.0;
    let mut done = 0;
    for (i, (e, (mask, secs))) in episodes.iter().zip(results).enumerate() {
        let scored = mask.and_then(|m| counts.accumulate(&m, &e.query_mask, e.class_id));
        if let Err(err) = scored {
            failure = Some((i, err.to_string()));
            break;
        }
        seconds += secs;
        done += 1;
    }
    let scores = if done == 0 {
        Scores {
            classes: Vec::new(),
            mean_iou: 0.0,
            excluded: Vec::new(),
        }
    } else {
        counts.finalize()?
    };
    Ok(EvalReport {
        predictor: predictor.name().to_string(),
        info,
        episodes: done,
        scores,
        seconds_per_episode: if done > 0 { seconds / done as f64 } else { 0.0 },
        failure,
    })
}

/// Mean seconds per episode for each predictor and each k.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TimeTable {
    pub ks: Vec<usize>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl TimeTable {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn seconds(&self, predictor: &str, k: usize) -> Option<f64> {
        let col = self.ks.iter().position(|&x| x == k)?;
        self.rows.iter().find(|(n, _)| n == predictor).map(|(_, v)| v[col])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("predictor");
        for k in &self.ks {
            let _ = write!(out, ",k{k}_seconds");
        }
        out.push('\n');
        for (name, secs) in &self.rows {
            out.push_str(name);
            for s in secs {
                let _ = write!(out, ",{s:.6}");
            }
            out.push('\n');
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<12}", "predictor");
        for k in &self.ks {
            let _ = write!(out, " {:>12}", format!("{k}-shot (s)"));
        }
        out.push('\n');
        for (name, secs) in &self.rows {
            let _ = write!(out, "{name:<12}");
            for s in secs {
                let _ = write!(out, " {s:>12.4}");
            }
            out.push('\n');
        }
        out
    }
}

/// Times every predictor on each `(k, episodes)` set, single-threaded.
/// The first episode of each set is run once untimed as warm-up; the set is
/// then run `repeats` times. `repeats == 0` yields an empty table.
pub fn time_report(predictors: &[&dyn Predictor], sets: &[(usize, Vec<Episode>)], repeats: usize) -> Result<TimeTable> {
    if repeats == 0 {
        return Ok(TimeTable::default());
    }
    let mut table = TimeTable {
        ks: sets.iter().map(|(k, _)| *k).collect(),
        rows: Vec::new(),
    };
    for p in predictors {
        let mut row = Vec::with_capacity(sets.len());
        for (_, episodes) in sets {
            if let Some(first) = episodes.first() {
                p.predict(first)?;
            }
            let start = Instant::now();
            for _ in 0..repeats {
                for e in episodes {
                    p.predict(e)?;
                }
            }
            let n = (repeats * episodes.len()).max(1);
            row.push(start.elapsed().as_secs_f64() / n as f64);
        }
        table.rows.push((p.name().to_string(), row));
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(bits.len(), 1, bits.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_case() {
        let mut c = ClassCounts::new();
        c.accumulate(&mask(&[1, 1, 0, 1]), &mask(&[1, 1, 1, 0]), 3).unwrap();
        let k = c.get(3).unwrap();
        assert_eq!((k.tp, k.fp, k.fn_), (2, 1, 1));
        assert_eq!(c.finalize().unwrap().mean_iou, 0.5);
    }

    #[test]
    fn mean_is_unweighted_and_skips_empty_classes() {
        let mut c = ClassCounts::new();
        c.accumulate(&mask(&[1, 1]), &mask(&[1, 1]), 1).unwrap();
        c.accumulate(&mask(&[1, 0, 0, 0]), &mask(&[0, 1, 1, 1]), 2).unwrap();
        c.accumulate(&mask(&[0]), &mask(&[0]), 5).unwrap();
        let s = c.finalize().unwrap();
        assert_eq!(s.mean_iou, 0.5);
        assert_eq!(s.excluded, vec![5]);
    }

    #[test]
    fn all_zero_denominators_are_an_error() {
        let mut c = ClassCounts::new();
        c.accumulate(&mask(&[0]), &mask(&[0]), 1).unwrap();
        assert!(c.finalize().is_err());
        assert!(ClassCounts::new().finalize().is_err());
    }

    #[test]
    fn size_mismatch_rejected() {
        let mut c = ClassCounts::new();
        assert!(c.accumulate(&mask(&[1]), &mask(&[1, 0]), 1).is_err());
    }

    #[test]
    fn zero_repeats_give_empty_table() {
        let t = time_report(&[], &[(1, Vec::new())], 0).unwrap();
        assert!(t.is_empty());
    }
}
