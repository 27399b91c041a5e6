//! Accuracy bookkeeping and the Friedman / Iman–Davenport / Nemenyi
//! comparison of several methods over paired runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::RunReport;

pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::ShapeError(format!("{} predictions for {} labels", predictions.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(Error::EmptyInput);
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean of the per-session accuracies.
pub fn average_accuracy(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (zero for a single value).
    pub std: f64,
}

impl Summary {
    /// `mean±std` in percent with two decimals.
    pub fn percent(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

pub fn aggregate(values: &[f64]) -> Result<Summary> {
    let n = values.len();
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Summary { n, mean, std })
}

/// Ranks within each row, 1 for the highest score, ties sharing the mean
/// of the positions they span.
pub fn rank_rows(scores: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = check_matrix(scores)?;
    Ok(scores
        .iter()
        .map(|row| {
            let mut order: Vec<usize> = (0..k).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
            let mut ranks = vec![0.0; k];
            let mut i = 0;
            while i < k {
                let mut j = i;
                while j + 1 < k && row[order[j + 1]] == row[order[i]] {
                    j += 1;
                }
                let r = (i + j) as f64 / 2.0 + 1.0;
                for &o in &order[i..=j] {
                    ranks[o] = r;
                }
                i = j + 1;
            }
            ranks
        })
        .collect())
}

fn check_matrix(scores: &[Vec<f64>]) -> Result<usize> {
    let first = scores.first().ok_or(Error::EmptyInput)?;
    let k = first.len();
    if k < 2 {
        return Err(Error::RequiresTwoMethods(k));
    }
    for row in scores {
        if row.len() != k {
            return Err(Error::ShapeError(format!("row of {} scores, expected {k}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite score".into()));
        }
    }
    Ok(k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub n: usize,
    pub k: usize,
    pub mean_ranks: Vec<f64>,
    pub chi2: f64,
    pub chi2_df: f64,
    pub chi2_p: f64,
    /// Iman–Davenport statistic; infinite when every row ranks identically.
    pub f: f64,
    pub f_df1: f64,
    pub f_df2: f64,
    pub f_p: f64,
}

/// Friedman test over `n` rows (runs) of `k` scores (methods), with the
/// Iman–Davenport F correction.
pub fn friedman(scores: &[Vec<f64>]) -> Result<FriedmanResult> {
    let k = check_matrix(scores)?;
    let n = scores.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} paired runs, need at least 2")));
    }
    let ranks = rank_rows(scores)?;
    let mean_ranks: Vec<f64> = (0..k).map(|j| ranks.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let (nf, kf) = (n as f64, k as f64);
    let sum_sq: f64 = mean_ranks.iter().map(|r| r * r).sum();
    let chi2 = (12.0 * nf / (kf * (kf + 1.0)) * (sum_sq - kf * (kf + 1.0).powi(2) / 4.0)).max(0.0);
    let chi2_df = kf - 1.0;
    let chi2_p = chi2_sf(chi2, chi2_df);
    let f_df1 = kf - 1.0;
    let f_df2 = (kf - 1.0) * (nf - 1.0);
    let denom = nf * (kf - 1.0) - chi2;
    let (f, f_p) = if denom <= 1e-12 * nf * kf {
        (f64::INFINITY, 0.0)
    } else {
        let f = (nf - 1.0) * chi2 / denom;
        (f, f_sf(f, f_df1, f_df2))
    };
    Ok(FriedmanResult { n, k, mean_ranks, chi2, chi2_df, chi2_p, f, f_df1, f_df2, f_p })
}

/// Two-tailed Nemenyi critical values q_α (studentized range / √2) for
/// k = 2..=20.
const Q_05: [f64; 19] = [
    1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164, 3.219, 3.268, 3.313, 3.354, 3.391, 3.426, 3.458,
    3.489, 3.517, 3.544,
];
const Q_10: [f64; 19] = [
    1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920, 2.978, 3.030, 3.077, 3.120, 3.159, 3.196, 3.230,
    3.261, 3.291, 3.319,
];

pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64> {
    let table = if (alpha - 0.05).abs() < 1e-12 {
        &Q_05
    } else if (alpha - 0.10).abs() < 1e-12 {
        &Q_10
    } else {
        return Err(Error::UnsupportedParameters(format!("alpha {alpha} (tabulated: 0.05, 0.10)")));
    };
    if k < 2 {
        return Err(Error::RequiresTwoMethods(k));
    }
    table.get(k - 2).copied().ok_or_else(|| Error::UnsupportedParameters(format!("k = {k} methods (tabulated up to 20)")))
}

/// Nemenyi critical difference of mean ranks for `k` methods over `n` runs.
pub fn nemenyi_cd(k: usize, n: usize, alpha: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    let q = nemenyi_q(k, alpha)?;
    Ok(q * ((k * (k + 1)) as f64 / (6.0 * n as f64)).sqrt())
}

/// `hist[j][r]`: runs in which method `j` took place `r + 1`. Tied methods
/// all take the best place of their group.
pub fn rank_histogram(scores: &[Vec<f64>]) -> Result<Vec<Vec<usize>>> {
    let k = check_matrix(scores)?;
    let mut hist = vec![vec![0; k]; k];
    for row in scores {
        for j in 0..k {
            let place = row.iter().filter(|&&v| v > row[j]).count();
            hist[j][place] += 1;
        }
    }
    Ok(hist)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdDiagram {
    pub cd: f64,
    /// (method, mean rank), best first.
    pub methods: Vec<(String, f64)>,
    /// Maximal runs of consecutive methods (indices into `methods`) whose
    /// mean ranks span at most the critical difference.
    pub bars: Vec<(usize, usize)>,
    /// Connected groups under "differs by at most cd", i.e. the
    /// transitive closure of the bars.
    pub clusters: Vec<Vec<usize>>,
}

pub fn cd_diagram_data(names: &[String], mean_ranks: &[f64], cd: f64) -> Result<CdDiagram> {
    if names.len() != mean_ranks.len() {
        return Err(Error::ShapeError("names and ranks differ in length".into()));
    }
    let mut methods: Vec<(String, f64)> = names.iter().cloned().zip(mean_ranks.iter().copied()).collect();
    methods.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let k = methods.len();
    let mut bars: Vec<(usize, usize)> = Vec::new();
    for i in 0..k {
        let mut j = i;
        while j + 1 < k && methods[j + 1].1 - methods[i].1 <= cd {
            j += 1;
        }
        if j > i && bars.last().is_none_or(|&(_, end)| end < j) {
            bars.push((i, j));
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for i in 0..k {
        match clusters.last_mut() {
            Some(c) if methods[i].1 - methods[*c.last().expect("non-empty")].1 <= cd => c.push(i),
            _ => clusters.push(vec![i]),
        }
    }
    Ok(CdDiagram { cd, methods, bars, clusters })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Two-sided exact binomial p-value over the non-tied pairs.
    pub p_value: f64,
}

/// Paired sign test of `a` against `b`.
pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(Error::ShapeError("paired samples differ in length".into()));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let ties = a.len() - wins - losses;
    let n = wins + losses;
    let p_value = if n == 0 {
        1.0
    } else {
        let tail: f64 = (0..=wins.min(losses)).map(|i| (ln_choose(n, i) - n as f64 * 2f64.ln()).exp()).sum();
        (2.0 * tail).min(1.0)
    };
    Ok(SignTest { wins, losses, ties, p_value })
}

fn ln_choose(n: usize, k: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Lanczos approximation (g = 7, nine terms).
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized upper incomplete gamma Q(a, x).
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let lead = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        let (mut sum, mut term, mut ap) = (1.0 / a, 1.0 / a, a);
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (1.0 - sum * lead.exp()).clamp(0.0, 1.0)
    } else {
        // Modified Lentz on the continued fraction.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (lead.exp() * h).clamp(0.0, 1.0)
    }
}

/// Regularized incomplete beta I_x(a, b).
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let tiny = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = 1.0 + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Upper tail of the χ² distribution.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    gamma_q(df / 2.0, x / 2.0)
}

/// Upper tail of the F distribution.
pub fn f_sf(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    beta_inc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
}

/// Report records of one method, as read from a results file.
#[derive(Clone, Debug)]
pub struct MethodResults {
    pub name: String,
    pub runs: Vec<RunReport>,
}

impl MethodResults {
    /// Groups reports by method name, keeping first-seen order.
    pub fn group(reports: Vec<RunReport>) -> Vec<MethodResults> {
        let mut out: Vec<MethodResults> = Vec::new();
        for r in reports {
            match out.iter_mut().find(|m| m.name == r.method) {
                Some(m) => m.runs.push(r),
                None => out.push(MethodResults { name: r.method.clone(), runs: vec![r] }),
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub runs: usize,
    pub failed: usize,
    pub aa: Summary,
    pub per_session: Vec<Summary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub alpha: f64,
    pub methods: Vec<String>,
    pub friedman: FriedmanResult,
    pub cd: f64,
    pub diagram: CdDiagram,
    pub rank_histogram: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub summaries: Vec<MethodSummary>,
    /// Runs shared by every method (by seed), used for the rank tests.
    pub paired_seeds: Vec<u64>,
    pub average_accuracy: Comparison,
    pub per_session: Option<Vec<Comparison>>,
}

pub fn summarize(m: &MethodResults) -> Result<MethodSummary> {
    let done: Vec<&RunReport> = m.runs.iter().filter(|r| r.completed).collect();
    if done.is_empty() {
        return Err(Error::InsufficientData(format!("{} has no completed runs", m.name)));
    }
    let aa_values = done.iter().map(|r| average_accuracy(&r.accuracies)).collect::<Result<Vec<_>>>()?;
    let aa = aggregate(&aa_values)?;
    let sessions = done.iter().map(|r| r.accuracies.len()).min().unwrap_or(0);
    let per_session = (0..sessions)
        .map(|s| aggregate(&done.iter().map(|r| r.accuracies[s]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    Ok(MethodSummary { method: m.name.clone(), runs: m.runs.len(), failed: m.runs.len() - done.len(), aa, per_session })
}

fn compare(names: &[String], scores: &[Vec<f64>], alpha: f64) -> Result<Comparison> {
    let friedman = friedman(scores)?;
    let cd = nemenyi_cd(names.len(), scores.len(), alpha)?;
    let diagram = cd_diagram_data(names, &friedman.mean_ranks, cd)?;
    Ok(Comparison { alpha, methods: names.to_vec(), rank_histogram: rank_histogram(scores)?, friedman, cd, diagram })
}

/// Summaries plus rank tests over the seeds every method completed.
pub fn compare_methods(methods: &[MethodResults], alpha: f64, per_session: bool) -> Result<StatsReport> {
    if methods.len() < 2 {
        return Err(Error::RequiresTwoMethods(methods.len()));
    }
    nemenyi_q(methods.len(), alpha)?;
    let summaries = methods.iter().map(summarize).collect::<Result<Vec<_>>>()?;
    let by_seed: Vec<BTreeMap<u64, &RunReport>> = methods
        .iter()
        .map(|m| m.runs.iter().filter(|r| r.completed).map(|r| (r.seed, r)).collect())
        .collect();
    let seeds: Vec<u64> =
        by_seed[0].keys().copied().filter(|s| by_seed.iter().all(|m| m.contains_key(s))).collect();
    if seeds.len() < 2 {
        return Err(Error::InsufficientData(format!("{} seeds shared by all methods, need at least 2", seeds.len())));
    }
    let names: Vec<String> = methods.iter().map(|m| m.name.clone()).collect();
    let aa_scores: Vec<Vec<f64>> = seeds.iter().map(|s| by_seed.iter().map(|m| m[s].aa).collect()).collect();
    let average_accuracy = compare(&names, &aa_scores, alpha)?;
    let per_session = if per_session {
        let sessions = seeds.iter().flat_map(|s| by_seed.iter().map(|m| m[s].accuracies.len())).min().unwrap_or(0);
        Some(
            (0..sessions)
                .map(|k| {
                    let scores: Vec<Vec<f64>> =
                        seeds.iter().map(|s| by_seed.iter().map(|m| m[s].accuracies[k]).collect()).collect();
                    compare(&names, &scores, alpha)
                })
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    Ok(StatsReport { summaries, paired_seeds: seeds, average_accuracy, per_session })
}

/// Markdown table of `mean±std` accuracies (percent) per session and AA.
pub fn accuracy_table(summaries: &[MethodSummary]) -> String {
    let sessions = summaries.iter().map(|s| s.per_session.len()).max().unwrap_or(0);
    let mut out = String::from("| method |");
    for s in 0..sessions {
        out.push_str(&format!(" S{s} |"));
    }
    out.push_str(" AA | runs |\n|---|");
    out.push_str(&"---|".repeat(sessions + 2));
    out.push('\n');
    for m in summaries {
        out.push_str(&format!("| {} |", m.method));
        for s in 0..sessions {
            match m.per_session.get(s) {
                Some(v) => out.push_str(&format!(" {} |", v.percent())),
                None => out.push_str(" - |"),
            }
        }
        out.push_str(&format!(" {} | {}/{} |\n", m.aa.percent(), m.runs - m.failed, m.runs));
    }
    out
}

/// Markdown rendering of one rank comparison.
pub fn comparison_table(c: &Comparison) -> String {
    let f = &c.friedman;
    let mut out = format!(
        "Friedman chi2 = {:.3} (df {}, p = {:.3e}); Iman-Davenport F = {:.3} (df {}, {}, p = {:.3e}); \
         Nemenyi CD = {:.3} at alpha {} over {} runs\n\n| method | mean rank |",
        f.chi2, f.chi2_df, f.chi2_p, f.f, f.f_df1, f.f_df2, f.f_p, c.cd, c.alpha, f.n
    );
    let k = c.methods.len();
    for r in 1..=k {
        out.push_str(&format!(" #{r} |"));
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(k));
    out.push('\n');
    for (j, name) in c.methods.iter().enumerate() {
        out.push_str(&format!("| {name} | {:.3} |", f.mean_ranks[j]));
        for count in &c.rank_histogram[j] {
            out.push_str(&format!(" {count} |"));
        }
        out.push('\n');
    }
    out.push_str("\nNot significantly different:");
    for &(a, b) in &c.diagram.bars {
        let group: Vec<&str> = c.diagram.methods[a..=b].iter().map(|(n, _)| n.as_str()).collect();
        out.push_str(&format!(" [{}]", group.join(", ")));
    }
    if c.diagram.bars.is_empty() {
        out.push_str(" none");
    }
    out.push('\n');
    out
}
