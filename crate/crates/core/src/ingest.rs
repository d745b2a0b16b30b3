//! Abundance tables: parsing, low-abundance filtering, fold splits and synthetic cohorts.
//!
//! Files are feature-major (one taxon per row, one sample per column, as OTU tables are
//! usually distributed). In memory the table is sample-major because every downstream
//! stage treats samples as graph nodes.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Samples × features matrix of relative abundances.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceTable {
    sample_ids: Vec<String>,
    feature_names: Vec<String>,
    values: Tensor,
}

impl AbundanceTable {
    pub fn new(sample_ids: Vec<String>, feature_names: Vec<String>, values: Tensor) -> Result<Self> {
        if values.shape() != (sample_ids.len(), feature_names.len()) {
            return Err(Error::Shape {
                op: "AbundanceTable::new",
                left: values.shape(),
                right: (sample_ids.len(), feature_names.len()),
            });
        }
        check_unique("sample", &sample_ids)?;
        check_unique("feature", &feature_names)?;
        for i in 0..values.rows() {
            for (j, &v) in values.row(i).iter().enumerate() {
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::BadAbundance {
                        row: j + 2,
                        column: i + 2,
                        value: v,
                    });
                }
            }
        }
        Ok(AbundanceTable {
            sample_ids,
            feature_names,
            values,
        })
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// N×F, row `i` is sample `i`.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn value(&self, sample: &str, feature: &str) -> Option<f64> {
        let i = self.sample_ids.iter().position(|s| s == sample)?;
        let j = self.feature_names.iter().position(|f| f == feature)?;
        Some(self.values.get(i, j))
    }
}

fn check_unique(what: &'static str, names: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(names.len());
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::Duplicate {
                what,
                name: n.clone(),
            });
        }
    }
    Ok(())
}

/// Binary class labels, 0 = healthy, 1 = diseased, aligned with a table's sample order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn new(labels: Vec<u8>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Labels(format!("label {bad} is not 0 or 1")));
        }
        Ok(LabelVector(labels))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> u8 {
        self.0[i]
    }

    pub fn count(&self, class: u8) -> usize {
        self.0.iter().filter(|&&l| l == class).count()
    }

    /// Labels permuted by a seeded shuffle; used for null-control runs.
    pub fn permuted(&self, seed: u64) -> LabelVector {
        let mut v = self.0.clone();
        v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        LabelVector(v)
    }
}

/// Assignment of each sample to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_of_sample: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    /// `(train, held_out)` sample indices for fold `f`, each in ascending order.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, &fold) in self.fold_of_sample.iter().enumerate() {
            if fold == f {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of_sample {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Low-abundance removal rule: drop a feature when at least `host_count_threshold` samples
/// carry it below `abundance_threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub abundance_threshold: f64,
    pub host_count_threshold: usize,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            abundance_threshold: 0.01,
            host_count_threshold: 120,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.abundance_threshold > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "abundance threshold must be positive, got {}",
                self.abundance_threshold
            )));
        }
        if self.host_count_threshold < 1 {
            return Err(Error::InvalidArgument("host count threshold must be at least 1".into()));
        }
        Ok(())
    }
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Parse a feature-major delimited table: the first row holds sample ids, the first column
/// feature names. Row and column numbers in errors are 1-based file coordinates.
pub fn parse_abundance_table(text: &str, delimiter: char) -> Result<AbundanceTable> {
    let mut lines = data_lines(text);
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Empty("abundance table has no header row".into()))?;
    let header: Vec<&str> = header.split(delimiter).collect();
    let width = header.len();
    if width < 2 {
        return Err(Error::Empty("abundance table header names no samples".into()));
    }
    let sample_ids: Vec<String> = header[1..].iter().map(|s| s.trim().to_string()).collect();
    check_unique("sample", &sample_ids)?;

    let mut feature_names = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (row, line) in lines {
        let cells: Vec<&str> = line.split(delimiter).collect();
        if cells.len() != width {
            return Err(Error::Ragged {
                row,
                expected: width,
                found: cells.len(),
            });
        }
        feature_names.push(cells[0].trim().to_string());
        let mut col = Vec::with_capacity(width - 1);
        for (c, cell) in cells[1..].iter().enumerate() {
            let text = cell.trim();
            let v: f64 = text.parse().map_err(|_| Error::BadCell {
                row,
                column: c + 2,
                text: text.to_string(),
            })?;
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::BadAbundance {
                    row,
                    column: c + 2,
                    value: v,
                });
            }
            col.push(v);
        }
        columns.push(col);
    }
    if feature_names.is_empty() {
        return Err(Error::Empty("abundance table has no feature rows".into()));
    }
    check_unique("feature", &feature_names)?;
    let n = sample_ids.len();
    let f = feature_names.len();
    let values = Tensor::from_fn(n, f, |i, j| columns[j][i]);
    AbundanceTable::new(sample_ids, feature_names, values)
}

/// Inverse of [`parse_abundance_table`]. Floats are written in shortest round-trip form.
pub fn serialize_abundance_table(table: &AbundanceTable, delimiter: char) -> String {
    let mut out = String::new();
    out.push_str("feature");
    for s in &table.sample_ids {
        out.push(delimiter);
        out.push_str(s);
    }
    out.push('\n');
    for (j, name) in table.feature_names.iter().enumerate() {
        out.push_str(name);
        for i in 0..table.n_samples() {
            out.push(delimiter);
            out.push_str(&format!("{}", table.values.get(i, j)));
        }
        out.push('\n');
    }
    out
}

/// Parse a two-column `sample_id, label` file and align it with `table`'s sample order.
///
/// A first line whose label field is not 0/1 is treated as a header.
pub fn parse_labels(text: &str, delimiter: char, table: &AbundanceTable) -> Result<LabelVector> {
    let mut by_id: HashMap<String, u8> = HashMap::new();
    for (k, (row, line)) in data_lines(text).enumerate() {
        let cells: Vec<&str> = line.split(delimiter).map(str::trim).collect();
        if cells.len() != 2 {
            return Err(Error::Ragged {
                row,
                expected: 2,
                found: cells.len(),
            });
        }
        let label = match cells[1] {
            "0" => 0,
            "1" => 1,
            _ if k == 0 => continue,
            other => {
                return Err(Error::Labels(format!(
                    "row {row}: label {other:?} is not 0 or 1"
                )))
            }
        };
        if by_id.insert(cells[0].to_string(), label).is_some() {
            return Err(Error::Duplicate {
                what: "label sample",
                name: cells[0].to_string(),
            });
        }
    }
    let labels = table
        .sample_ids()
        .iter()
        .map(|id| {
            by_id
                .get(id)
                .copied()
                .ok_or_else(|| Error::Labels(format!("no label for sample {id:?}")))
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelVector::new(labels)
}

pub fn serialize_labels(sample_ids: &[String], labels: &LabelVector, delimiter: char) -> String {
    let mut out = format!("sample_id{delimiter}label\n");
    for (id, l) in sample_ids.iter().zip(labels.as_slice()) {
        out.push_str(&format!("{id}{delimiter}{l}\n"));
    }
    out
}

/// Names and low-abundance host counts of the features a filter removed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemovedFeature {
    pub name: String,
    pub low_count: usize,
}

/// Apply `policy`, returning the filtered table and what was removed.
pub fn filter_low_abundance_report(
    table: &AbundanceTable,
    policy: &FilterPolicy,
) -> Result<(AbundanceTable, Vec<RemovedFeature>)> {
    policy.validate()?;
    let v = table.values();
    let mut keep = Vec::new();
    let mut removed = Vec::new();
    for j in 0..table.n_features() {
        let low = (0..table.n_samples())
            .filter(|&i| v.get(i, j) < policy.abundance_threshold)
            .count();
        if low >= policy.host_count_threshold {
            removed.push(RemovedFeature {
                name: table.feature_names[j].clone(),
                low_count: low,
            });
        } else {
            keep.push(j);
        }
    }
    if keep.is_empty() {
        return Err(Error::AllFeaturesRemoved);
    }
    let values = Tensor::from_fn(table.n_samples(), keep.len(), |i, k| v.get(i, keep[k]));
    let names = keep.iter().map(|&j| table.feature_names[j].clone()).collect();
    let filtered = AbundanceTable {
        sample_ids: table.sample_ids.clone(),
        feature_names: names,
        values,
    };
    Ok((filtered, removed))
}

pub fn filter_low_abundance(table: &AbundanceTable, policy: &FilterPolicy) -> Result<AbundanceTable> {
    filter_low_abundance_report(table, policy).map(|(t, _)| t)
}

/// Seeded k-fold partition; fold sizes are ⌊n/k⌋ or ⌈n/k⌉.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return Err(Error::InvalidArgument(format!(
            "fold count must satisfy 2 <= k <= n, got k={k}, n={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of_sample = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of_sample[i] = pos % k;
    }
    Ok(FoldAssignment {
        fold_of_sample,
        k,
        seed,
    })
}

/// Spread of the shared log-profile across features.
const PROFILE_LOG_SD: f64 = 0.5;
/// Half the class difference in log-profile per unit of separation.
const CLASS_SHIFT_SCALE: f64 = 0.25;
/// Gamma concentration per feature; larger means less per-sample noise.
const CONCENTRATION_PER_FEATURE: f64 = 40.0;

/// Two-class synthetic cohort with compositional rows.
///
/// Both classes share a random log-profile; class 1 shifts it by `+separation·δ/4` and class 0
/// by `−separation·δ/4` along a random direction δ. Each sample is a Dirichlet draw around its
/// class profile. Samples are interleaved by class (`s0` healthy, `s1` diseased, ...).
pub fn synth_cohort(
    n_per_class: usize,
    f: usize,
    separation: f64,
    seed: u64,
) -> Result<(AbundanceTable, LabelVector)> {
    if n_per_class < 2 || f < 4 || !(separation >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "synth_cohort needs n_per_class >= 2, f >= 4, separation >= 0; got {n_per_class}, {f}, {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let base: Vec<f64> = (0..f).map(|_| PROFILE_LOG_SD * normal.sample(&mut rng)).collect();
    let direction: Vec<f64> = (0..f).map(|_| normal.sample(&mut rng)).collect();

    let profile = |sign: f64| -> Vec<f64> {
        let mut p: Vec<f64> = base
            .iter()
            .zip(&direction)
            .map(|(b, d)| b + sign * separation * CLASS_SHIFT_SCALE * d)
            .collect();
        crate::autodiff::softmax_in_place(&mut p);
        p
    };
    let profiles = [profile(-1.0), profile(1.0)];
    let concentration = CONCENTRATION_PER_FEATURE * f as f64;

    let n = 2 * n_per_class;
    let mut values = Tensor::zeros(n, f);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        labels.push(class as u8);
        let row = values.row_mut(i);
        for (x, &pj) in row.iter_mut().zip(&profiles[class]) {
            let g = Gamma::new(concentration * pj, 1.0).expect("positive shape");
            *x = g.sample(&mut rng);
        }
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= total);
    }
    let sample_ids = (0..n).map(|i| format!("s{i}")).collect();
    let feature_names = (0..f).map(|j| format!("taxon_{j}")).collect();
    Ok((
        AbundanceTable::new(sample_ids, feature_names, values)?,
        LabelVector::new(labels)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn all_zero_file() {
        let t = parse_abundance_table("id\ts1\ts2\ts3\na\t0\t0\t0\nb\t0\t0\t0\n", '\t').unwrap();
        assert_eq!((t.n_samples(), t.n_features()), (3, 2));
        assert!(t.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn direct_readback_is_transposed() {
        let t = parse_abundance_table("id s1 s2\ntaxA 0.5 0.25\n", ' ').unwrap();
        assert_eq!(t.value("s1", "taxA"), Some(0.5));
        assert_eq!(t.value("s2", "taxA"), Some(0.25));
        assert_eq!(t.values().shape(), (2, 1));
    }

    #[test]
    fn ragged_row_reports_row_two() {
        let err = parse_abundance_table("id,s1,s2\ntaxA,0.1,0.2,0.3\n", ',').unwrap_err();
        assert!(matches!(err, Error::Ragged { row: 2, expected: 3, found: 4 }), "{err}");
    }

    #[test]
    fn bad_cell_reports_coordinates() {
        let err = parse_abundance_table("id,s1,s2\na,0.1,0.2\nb,0.3,x\n", ',').unwrap_err();
        assert!(matches!(err, Error::BadCell { row: 3, column: 3, .. }), "{err}");
    }

    #[test]
    fn comma_decimal_is_rejected() {
        let err = parse_abundance_table("id;s1\na;0,5\n", ';').unwrap_err();
        assert!(matches!(err, Error::BadCell { .. }));
    }

    #[test]
    fn negative_and_nan_rejected() {
        assert!(parse_abundance_table("id,s1\na,-0.1\n", ',').is_err());
        assert!(parse_abundance_table("id,s1\na,NaN\n", ',').is_err());
    }

    #[test]
    fn duplicates_are_named() {
        let err = parse_abundance_table("id,s1,s1\na,0,0\n", ',').unwrap_err();
        assert!(err.to_string().contains("\"s1\""), "{err}");
        let err = parse_abundance_table("id,s1\na,0\na,1\n", ',').unwrap_err();
        assert!(err.to_string().contains("\"a\""), "{err}");
    }

    fn table_with(n: usize, column: impl Fn(usize) -> [f64; 2]) -> AbundanceTable {
        let values = Tensor::from_fn(n, 2, |i, j| column(i)[j]);
        AbundanceTable::new(
            (0..n).map(|i| format!("s{i}")).collect(),
            vec!["low".into(), "high".into()],
            values,
        )
        .unwrap()
    }

    #[test]
    fn filter_removes_mostly_absent_feature() {
        // Feature "low" is below 0.01 in 150 of 200 samples.
        let t = table_with(200, |i| [if i < 150 { 0.001 } else { 0.2 }, 0.5]);
        let (f, removed) = filter_low_abundance_report(&t, &FilterPolicy::default()).unwrap();
        assert_eq!(f.feature_names(), &["high".to_string()]);
        assert_eq!(removed, vec![RemovedFeature { name: "low".into(), low_count: 150 }]);
        assert_eq!(f.sample_ids(), t.sample_ids());
    }

    #[test]
    fn filter_keeps_abundant_feature() {
        let t = table_with(200, |_| [0.01, 0.5]);
        assert_eq!(filter_low_abundance(&t, &FilterPolicy::default()).unwrap(), t);
    }

    #[test]
    fn small_cohort_is_unchanged() {
        let t = table_with(100, |_| [0.0, 0.001]);
        assert_eq!(filter_low_abundance(&t, &FilterPolicy::default()).unwrap(), t);
    }

    #[test]
    fn filtering_everything_is_error() {
        let t = table_with(130, |_| [0.0, 0.0]);
        assert!(matches!(
            filter_low_abundance(&t, &FilterPolicy::default()),
            Err(Error::AllFeaturesRemoved)
        ));
    }

    #[test]
    fn kfold_exact_and_pigeonhole() {
        let a = kfold_split(10, 5, 3).unwrap();
        assert_eq!(a.fold_sizes(), vec![2; 5]);
        let mut s = kfold_split(11, 5, 3).unwrap().fold_sizes();
        s.sort();
        assert_eq!(s, vec![2, 2, 2, 2, 3]);
        assert_eq!(kfold_split(11, 5, 3).unwrap(), kfold_split(11, 5, 3).unwrap());
        assert!(kfold_split(4, 5, 0).is_err());
        assert!(kfold_split(4, 1, 0).is_err());
    }

    #[test]
    fn synth_zero_separation_shares_profile() {
        // With no separation the two class profiles coincide, so class means converge.
        let (t, labels) = synth_cohort(400, 8, 0.0, 2).unwrap();
        let v = t.values();
        for j in 0..8 {
            let mean = |c: u8| {
                let rows: Vec<usize> = (0..t.n_samples()).filter(|&i| labels.get(i) == c).collect();
                rows.iter().map(|&i| v.get(i, j)).sum::<f64>() / rows.len() as f64
            };
            let (m0, m1) = (mean(0), mean(1));
            assert!((m0 - m1).abs() < 0.1 * m0.max(m1), "feature {j}: {m0} vs {m1}");
        }
    }

    #[test]
    fn synth_labels_balanced() {
        let (_, labels) = synth_cohort(7, 5, 1.0, 0).unwrap();
        assert_eq!((labels.count(0), labels.count(1)), (7, 7));
        assert!(synth_cohort(1, 5, 1.0, 0).is_err());
        assert!(synth_cohort(3, 3, 1.0, 0).is_err());
    }

    #[test]
    fn labels_align_by_sample_id() {
        let t = parse_abundance_table("id\tb\ta\nx\t0.1\t0.2\n", '\t').unwrap();
        let l = parse_labels("sample_id\tlabel\na\t1\nb\t0\n", '\t', &t).unwrap();
        assert_eq!(l.as_slice(), &[0, 1]);
        assert!(parse_labels("a\t1\n", '\t', &t).is_err());
        assert!(parse_labels("a\t1\nb\t2\n", '\t', &t).is_err());
    }

    proptest! {
        #[test]
        fn kfold_sizes_balanced(n in 2usize..1000, k in 2usize..50, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let sizes = kfold_split(n, k, seed).unwrap().fold_sizes();
            let (lo, hi) = (*sizes.iter().min().unwrap(), *sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            prop_assert!(lo >= 1);
        }

        #[test]
        fn synth_rows_are_compositional(seed in any::<u64>(), sep in 0.0f64..4.0) {
            let (t, _) = synth_cohort(3, 6, sep, seed).unwrap();
            for i in 0..t.n_samples() {
                let row = t.values().row(i);
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn serialize_parse_roundtrip(seed in any::<u64>(), comma in any::<bool>()) {
            let d = if comma { ',' } else { '\t' };
            let (t, _) = synth_cohort(3, 5, 1.5, seed).unwrap();
            let back = parse_abundance_table(&serialize_abundance_table(&t, d), d).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn filter_is_idempotent(seed in any::<u64>(), thr in 0.05f64..0.3, hosts in 1usize..12) {
            let (t, _) = synth_cohort(5, 8, 2.0, seed).unwrap();
            let policy = FilterPolicy { abundance_threshold: thr, host_count_threshold: hosts };
            if let Ok(once) = filter_low_abundance(&t, &policy) {
                prop_assert_eq!(filter_low_abundance(&once, &policy).unwrap(), once);
            }
        }
    }
}
