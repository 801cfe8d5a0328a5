//! Regional group-wise comparison of real and synthesized cohorts.
//!
//! Three analysis families, each BH-corrected across regions on its own:
//! one paired real-vs-synth test per group (`paired:<group>`), and the
//! between-group independent test on real (`inter:real`) and on synth
//! (`inter:synth`) uptake. A test with zero variance is reported as
//! degenerate with `t = 0`, `p = 1`, never significant.

use rayon::prelude::*;
use std::collections::BTreeMap;
use std::fmt::Write;

use super::roi::roi_uptake;
use super::ttest::{paired_ttest, student_ttest, welch_ttest, TTest};
use super::{bh_fdr, Result, StatError};
use crate::volume::{LabelMap3D, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndependentTest {
    Welch,
    Student,
}

impl IndependentTest {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "welch" => Some(Self::Welch),
            "student" => Some(Self::Student),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Welch => "welch",
            Self::Student => "student",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportConfig {
    pub alpha: f64,
    pub ref_region: u16,
    pub independent: IndependentTest,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            ref_region: 1,
            independent: IndependentTest::Welch,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CohortSubject {
    pub id: String,
    pub group: String,
    pub real: Volume3D,
    pub synth: Volume3D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    Paired,
    Welch,
    Student,
}

impl TestKind {
    pub fn name(self) -> &'static str {
        match self {
            TestKind::Paired => "paired",
            TestKind::Welch => "welch",
            TestKind::Student => "student",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionRow {
    pub analysis: String,
    pub region: u16,
    pub name: String,
    pub n_a: usize,
    pub n_b: usize,
    /// Paired rows: real and synth means; inter rows: group A and group B.
    pub mean_a: f64,
    pub mean_b: f64,
    pub kind: TestKind,
    pub t: f64,
    pub df: f64,
    pub p_raw: f64,
    pub p_adj: f64,
    pub significant: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    /// `(A, B)` in lexicographic order.
    pub groups: (String, String),
    pub alpha: f64,
    pub intra: Vec<RegionRow>,
    pub inter_real: Vec<RegionRow>,
    pub inter_synth: Vec<RegionRow>,
    /// Fraction of regions where the two inter-group analyses agree on
    /// significance.
    pub concordance: f64,
}

pub const REPORT_COLUMNS: [&str; 14] = [
    "analysis",
    "region",
    "name",
    "n_a",
    "n_b",
    "mean_a",
    "mean_b",
    "test",
    "t",
    "df",
    "p_raw",
    "p_adj",
    "significant",
    "degenerate",
];

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

struct Family<'a> {
    analysis: String,
    kind: TestKind,
    samples: Vec<(u16, &'a [f64], &'a [f64])>,
}

fn run_family(family: Family<'_>, labels: &LabelMap3D, alpha: f64, test: impl Fn(&[f64], &[f64]) -> Result<TTest>) -> Result<Vec<RegionRow>> {
    let mut rows = Vec::with_capacity(family.samples.len());
    for (region, a, b) in family.samples {
        let (t, degenerate) = match test(a, b) {
            Ok(t) => (t, false),
            Err(StatError::DegenerateVariance) => {
                let df = match family.kind {
                    TestKind::Paired => a.len() as f64 - 1.0,
                    _ => (a.len() + b.len()) as f64 - 2.0,
                };
                (TTest { t: 0.0, df, p: 1.0 }, true)
            }
            Err(e) => return Err(e),
        };
        rows.push(RegionRow {
            analysis: family.analysis.clone(),
            region,
            name: labels.name(region),
            n_a: a.len(),
            n_b: b.len(),
            mean_a: mean(a),
            mean_b: mean(b),
            kind: family.kind,
            t: t.t,
            df: t.df,
            p_raw: t.p,
            p_adj: 1.0,
            significant: false,
            degenerate,
        });
    }
    let p: Vec<f64> = rows.iter().map(|r| r.p_raw).collect();
    let fdr = bh_fdr(&p, alpha)?;
    for (row, (adj, rej)) in rows.iter_mut().zip(fdr.adjusted.into_iter().zip(fdr.reject)) {
        row.p_adj = adj;
        row.significant = rej && !row.degenerate;
    }
    Ok(rows)
}

/// Per-region uptake vectors, subjects in input order.
type Uptakes = BTreeMap<u16, Vec<f64>>;

fn collect_uptakes(vols: &[&Volume3D], labels: &LabelMap3D, ref_region: u16) -> Result<Uptakes> {
    let maps = vols
        .par_iter()
        .map(|v| roi_uptake(v, labels, ref_region))
        .collect::<Result<Vec<_>>>()?;
    let mut out: Uptakes = BTreeMap::new();
    for m in maps {
        for (r, u) in m {
            out.entry(r).or_default().push(u);
        }
    }
    Ok(out)
}

pub fn group_report(subjects: &[CohortSubject], labels: &LabelMap3D, cfg: &ReportConfig) -> Result<GroupReport> {
    let mut names: Vec<&str> = subjects.iter().map(|s| s.group.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != 2 {
        return Err(StatError::BadGroups(format!("need exactly two groups, found {names:?}")));
    }
    let (ga, gb) = (names[0].to_owned(), names[1].to_owned());
    let independent = |a: &[f64], b: &[f64]| match cfg.independent {
        IndependentTest::Welch => welch_ttest(a, b),
        IndependentTest::Student => student_ttest(a, b),
    };
    let ind_kind = match cfg.independent {
        IndependentTest::Welch => TestKind::Welch,
        IndependentTest::Student => TestKind::Student,
    };

    let mut real = BTreeMap::new();
    let mut synth = BTreeMap::new();
    for g in [&ga, &gb] {
        let members: Vec<&CohortSubject> = subjects.iter().filter(|s| &s.group == g).collect();
        let r: Vec<&Volume3D> = members.iter().map(|s| &s.real).collect();
        let s: Vec<&Volume3D> = members.iter().map(|s| &s.synth).collect();
        real.insert(g.clone(), collect_uptakes(&r, labels, cfg.ref_region)?);
        synth.insert(g.clone(), collect_uptakes(&s, labels, cfg.ref_region)?);
    }
    let regions: Vec<u16> = real[&ga].keys().copied().collect();

    let mut intra = Vec::new();
    for g in [&ga, &gb] {
        let family = Family {
            analysis: format!("paired:{g}"),
            kind: TestKind::Paired,
            samples: regions.iter().map(|r| (*r, real[g][r].as_slice(), synth[g][r].as_slice())).collect(),
        };
        intra.extend(run_family(family, labels, cfg.alpha, paired_ttest)?);
    }
    let inter = |source: &BTreeMap<String, Uptakes>, tag: &str| {
        let family = Family {
            analysis: format!("inter:{tag}"),
            kind: ind_kind,
            samples: regions.iter().map(|r| (*r, source[&ga][r].as_slice(), source[&gb][r].as_slice())).collect(),
        };
        run_family(family, labels, cfg.alpha, independent)
    };
    let inter_real = inter(&real, "real")?;
    let inter_synth = inter(&synth, "synth")?;
    let agree = inter_real
        .iter()
        .zip(&inter_synth)
        .filter(|(a, b)| a.significant == b.significant)
        .count();
    let concordance = if regions.is_empty() { 1.0 } else { agree as f64 / regions.len() as f64 };
    Ok(GroupReport {
        groups: (ga, gb),
        alpha: cfg.alpha,
        intra,
        inter_real,
        inter_synth,
        concordance,
    })
}

impl GroupReport {
    pub fn rows(&self) -> impl Iterator<Item = &RegionRow> {
        self.intra.iter().chain(&self.inter_real).chain(&self.inter_synth)
    }

    /// Tab-separated rows in [`REPORT_COLUMNS`] order, with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = REPORT_COLUMNS.join("\t");
        s.push('\n');
        for r in self.rows() {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.analysis,
                r.region,
                r.name,
                r.n_a,
                r.n_b,
                r.mean_a,
                r.mean_b,
                r.kind.name(),
                r.t,
                r.df,
                r.p_raw,
                r.p_adj,
                r.significant,
                r.degenerate
            );
        }
        s
    }

    /// `key<TAB>value` summary lines.
    pub fn summary_tsv(&self) -> String {
        let count = |rows: &[RegionRow]| rows.iter().filter(|r| r.significant).count();
        let mut s = String::from("key\tvalue\n");
        let _ = writeln!(s, "group_a\t{}", self.groups.0);
        let _ = writeln!(s, "group_b\t{}", self.groups.1);
        let _ = writeln!(s, "alpha\t{}", self.alpha);
        let _ = writeln!(s, "regions\t{}", self.inter_real.len());
        let _ = writeln!(s, "intra_significant\t{}", count(&self.intra));
        let _ = writeln!(s, "inter_real_significant\t{}", count(&self.inter_real));
        let _ = writeln!(s, "inter_synth_significant\t{}", count(&self.inter_synth));
        let _ = writeln!(s, "concordance\t{}", self.concordance);
        s
    }
}

/// Long-format uptake values (`subject group cohort region name uptake`)
/// for external plotting.
pub fn violin_tsv(subjects: &[CohortSubject], labels: &LabelMap3D, ref_region: u16) -> Result<String> {
    let mut s = String::from("subject\tgroup\tcohort\tregion\tname\tuptake\n");
    for subj in subjects {
        for (cohort, v) in [("real", &subj.real), ("synth", &subj.synth)] {
            for (r, u) in roi_uptake(v, labels, ref_region)? {
                let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", subj.id, subj.group, cohort, r, labels.name(r), u);
            }
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::volume::Dims;

    fn setup(seed: u64) -> (Vec<CohortSubject>, LabelMap3D) {
        let d = Dims::new(6, 1, 1);
        let labels = LabelMap3D::new(d, vec![1, 1, 2, 2, 3, 3], BTreeMap::new()).unwrap();
        let mut rng = SplitMix64::new(seed);
        let subjects = (0..8)
            .map(|i| {
                let g = if i % 2 == 0 { "ctl" } else { "pat" };
                let real = Volume3D::raw(d, (0..6).map(|_| rng.uniform(0.2, 1.0) as f32).collect()).unwrap();
                CohortSubject {
                    id: format!("s{i}"),
                    group: g.into(),
                    synth: real.clone(),
                    real,
                }
            })
            .collect();
        (subjects, labels)
    }

    #[test]
    fn identical_synth_is_degenerate_and_concordant() {
        let (subjects, labels) = setup(3);
        let r = group_report(&subjects, &labels, &ReportConfig::default()).unwrap();
        assert_eq!(r.intra.len(), 6);
        assert!(r.intra.iter().all(|row| row.degenerate && !row.significant && row.p_raw == 1.0));
        for (a, b) in r.inter_real.iter().zip(&r.inter_synth) {
            assert_eq!((a.t, a.p_raw, a.significant), (b.t, b.p_raw, b.significant));
        }
        assert_eq!(r.concordance, 1.0);
        for row in r.rows() {
            assert!(row.p_adj >= row.p_raw && row.p_adj <= 1.0);
        }
        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().next().unwrap(), REPORT_COLUMNS.join("\t"));
        assert_eq!(tsv.lines().count(), 1 + 6 + 3 + 3);
    }

    #[test]
    fn three_groups_rejected() {
        let (mut subjects, labels) = setup(4);
        subjects[0].group = "other".into();
        assert!(matches!(
            group_report(&subjects, &labels, &ReportConfig::default()),
            Err(StatError::BadGroups(_))
        ));
    }
}
