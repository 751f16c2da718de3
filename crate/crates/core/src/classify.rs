//! Supervised checks: classifiers, cross-validation, and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::par;

/// Feature rows with class labels `0..class_names.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    /// Checks shapes, label range, finiteness, and that every class occurs.
    pub fn new(x: Array2<f64>, y: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::input(format!(
                "{} feature rows but {} labels",
                x.nrows(),
                y.len()
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::input("features contain non-finite values"));
        }
        let k = class_names.len();
        let mut seen = vec![false; k];
        for &l in &y {
            if l >= k {
                return Err(Error::input(format!("label {l} outside {k} classes")));
            }
            seen[l] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::input(format!(
                "class `{}` has no instances",
                class_names[c]
            )));
        }
        Ok(Dataset { x, y, class_names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Rows `rows` of this dataset; classes may end up empty.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes()];
        for &l in &self.y {
            c[l] += 1;
        }
        c
    }
}

/// Index of the largest score; ties go to the smaller index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Majority vote among the `k` nearest training rows, with vote fractions.
/// Vote ties go to the lower class.
pub fn knn_classify(
    train: &Dataset,
    x: ArrayView1<'_, f64>,
    k: usize,
) -> Result<(usize, Vec<f64>)> {
    if train.n() == 0 {
        return Err(Error::input("empty training set"));
    }
    if k == 0 || k > train.n() {
        return Err(Error::input(format!(
            "k = {k} must be in 1..={}",
            train.n()
        )));
    }
    let mut d: Vec<(f64, usize)> = train
        .x
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| (sq_dist(r, x), i))
        .collect();
    // Equidistant rows: lower class first, then lower index. Ordering by
    // class keeps duplicated training sets consistent with the original.
    let y = &train.y;
    let cmp = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.total_cmp(&b.0)
            .then(y[a.1].cmp(&y[b.1]))
            .then(a.1.cmp(&b.1))
    };
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    let mut scores = vec![0.0; train.n_classes()];
    for &(_, i) in &d {
        scores[train.y[i]] += 1.0;
    }
    for s in &mut scores {
        *s /= k as f64;
    }
    Ok((argmax(&scores), scores))
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Leaf {
        /// Class distribution of the training rows reaching this leaf.
        dist: Vec<f64>,
    },
    Split {
        feature: usize,
        /// Rows with `x[feature] <= threshold` go left.
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeModel {
    /// Node 0 is the root.
    pub nodes: Vec<TreeNode>,
}

impl TreeModel {
    pub fn predict_dist(&self, x: ArrayView1<'_, f64>) -> &[f64] {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { dist } => return dist,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], at: usize) -> usize {
            match &nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: None,
            min_leaf: 1,
        }
    }
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct TreeBuilder<'a> {
    data: &'a Dataset,
    params: TreeParams,
    mtry: Option<usize>,
    rng: Option<ChaCha8Rng>,
    nodes: Vec<TreeNode>,
}

impl TreeBuilder<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let mut dist = vec![0.0; self.data.n_classes()];
        for &r in rows {
            dist[self.data.y[r]] += 1.0;
        }
        let n = rows.len().max(1) as f64;
        for d in &mut dist {
            *d /= n;
        }
        self.nodes.push(TreeNode::Leaf { dist });
        self.nodes.len() - 1
    }

    fn candidate_features(&mut self) -> Vec<usize> {
        let q = self.data.x.ncols();
        match (self.mtry, self.rng.as_mut()) {
            (Some(m), Some(rng)) if m < q => {
                let mut f = rand::seq::index::sample(rng, q, m).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..q).collect(),
        }
    }

    fn best_split(&mut self, rows: &[usize], parent: f64) -> Option<(usize, f64, f64)> {
        let k = self.data.n_classes();
        let n = rows.len();
        let min_leaf = self.params.min_leaf.max(1);
        let mut best: Option<(usize, f64, f64)> = None;
        for f in self.candidate_features() {
            let mut order: Vec<(f64, usize)> = rows
                .iter()
                .map(|&r| (self.data.x[[r, f]], self.data.y[r]))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = vec![0usize; k];
            let mut right = vec![0usize; k];
            for &(_, y) in &order {
                right[y] += 1;
            }
            for i in 0..n - 1 {
                let y = order[i].1;
                left[y] += 1;
                right[y] -= 1;
                let (a, b) = (order[i].0, order[i + 1].0);
                if a == b {
                    continue;
                }
                let nl = i + 1;
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let score = (nl as f64 * gini(&left, nl) + nr as f64 * gini(&right, nr)) / n as f64;
                if best.is_none_or(|(_, _, s)| score < s) {
                    let mut t = a + (b - a) / 2.0;
                    if t >= b {
                        t = a;
                    }
                    best = Some((f, t, score));
                }
            }
        }
        best.filter(|&(_, _, s)| s < parent - 1e-12)
    }

    fn grow(&mut self, rows: &[usize], depth: usize) -> usize {
        let k = self.data.n_classes();
        let mut counts = vec![0usize; k];
        for &r in rows {
            counts[self.data.y[r]] += 1;
        }
        let parent = gini(&counts, rows.len());
        let depth_ok = self.params.max_depth.is_none_or(|d| depth < d);
        if !depth_ok || parent <= 0.0 || rows.len() < 2 * self.params.min_leaf.max(1) {
            return self.leaf(rows);
        }
        let Some((feature, threshold, _)) = self.best_split(rows, parent) else {
            return self.leaf(rows);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| self.data.x[[i, feature]] <= threshold);
        let at = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { dist: Vec::new() });
        let left = self.grow(&l, depth + 1);
        let right = self.grow(&r, depth + 1);
        self.nodes[at] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

fn fit_tree(
    data: &Dataset,
    rows: &[usize],
    params: TreeParams,
    mtry: Option<usize>,
    rng: Option<ChaCha8Rng>,
) -> TreeModel {
    let mut b = TreeBuilder {
        data,
        params,
        mtry,
        rng,
        nodes: Vec::new(),
    };
    if rows.is_empty() {
        b.leaf(rows);
    } else {
        b.grow(rows, 0);
    }
    TreeModel { nodes: b.nodes }
}

/// CART on Gini impurity with midpoint thresholds.
pub fn decision_tree_fit(train: &Dataset, params: TreeParams) -> TreeModel {
    let rows: Vec<usize> = (0..train.n()).collect();
    fit_tree(train, &rows, params, None, None)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestParams {
    pub n_trees: usize,
    pub tree: TreeParams,
    /// Features tried per split; `None` means `ceil(sqrt(q))`.
    pub mtry: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            tree: TreeParams::default(),
            mtry: None,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<TreeModel>,
    pub n_classes: usize,
}

impl ForestModel {
    pub fn predict_dist(&self, x: ArrayView1<'_, f64>) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_classes];
        for t in &self.trees {
            for (a, d) in acc.iter_mut().zip(t.predict_dist(x)) {
                *a += d;
            }
        }
        let n = self.trees.len().max(1) as f64;
        acc.iter().map(|a| a / n).collect()
    }
}

/// Bagged trees; tree `t` draws from a generator seeded with `seed + t`.
pub fn random_forest_fit(train: &Dataset, params: ForestParams, seed: u64) -> Result<ForestModel> {
    if params.n_trees == 0 {
        return Err(Error::input("a forest needs at least one tree"));
    }
    let q = train.x.ncols();
    let mtry = params
        .mtry
        .unwrap_or_else(|| (q as f64).sqrt().ceil() as usize)
        .clamp(1, q.max(1));
    let n = train.n();
    let trees = par::map_range(params.n_trees, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let rows: Vec<usize> = if params.bootstrap && n > 0 {
            (0..n).map(|_| rng.random_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        fit_tree(train, &rows, params.tree, Some(mtry), Some(rng))
    });
    Ok(ForestModel {
        trees,
        n_classes: train.n_classes(),
    })
}

/// What to train in cross-validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelSpec {
    Knn {
        k: usize,
    },
    DecisionTree(TreeParams),
    RandomForest(ForestParams),
    /// Always the most frequent training class.
    Majority,
    /// Uniformly random class.
    Random,
}

impl ModelSpec {
    pub fn name(&self) -> String {
        match self {
            ModelSpec::Knn { k } => format!("{k}-NN"),
            ModelSpec::DecisionTree(_) => "Decision tree".into(),
            ModelSpec::RandomForest(p) => format!("Random forest ({} trees)", p.n_trees),
            ModelSpec::Majority => "Majority class".into(),
            ModelSpec::Random => "Random".into(),
        }
    }

    pub fn fit(&self, train: &Dataset, seed: u64) -> Result<Model> {
        Ok(match *self {
            ModelSpec::Knn { k } => Model::Knn {
                train: train.clone(),
                k: k.min(train.n()),
            },
            ModelSpec::DecisionTree(p) => Model::Tree(decision_tree_fit(train, p)),
            ModelSpec::RandomForest(p) => Model::Forest(random_forest_fit(train, p, seed)?),
            ModelSpec::Majority => Model::Majority(argmax(
                &train
                    .class_counts()
                    .iter()
                    .map(|&c| c as f64)
                    .collect::<Vec<_>>(),
            )),
            ModelSpec::Random => Model::Random { seed },
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Knn { train: Dataset, k: usize },
    Tree(TreeModel),
    Forest(ForestModel),
    Majority(usize),
    Random { seed: u64 },
}

impl Model {
    /// Class scores for each row of `x`.
    pub fn predict_scores(
        &self,
        x: ArrayView2<'_, f64>,
        n_classes: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<ArrayView1<'_, f64>> = x.rows().into_iter().collect();
        match self {
            Model::Knn { train, k } => {
                par::map_slice(&rows, |r| knn_classify(train, *r, *k).map(|p| p.1))
                    .into_iter()
                    .collect()
            }
            Model::Tree(t) => Ok(rows.iter().map(|r| t.predict_dist(*r).to_vec()).collect()),
            Model::Forest(f) => Ok(par::map_slice(&rows, |r| f.predict_dist(*r))),
            Model::Majority(c) => Ok(rows.iter().map(|_| one_hot(*c, n_classes)).collect()),
            Model::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok(rows
                    .iter()
                    .map(|_| one_hot(rng.random_range(0..n_classes), n_classes))
                    .collect())
            }
        }
    }

    pub fn predict(&self, x: ArrayView2<'_, f64>, n_classes: usize) -> Result<Vec<usize>> {
        Ok(self
            .predict_scores(x, n_classes)?
            .iter()
            .map(|s| argmax(s))
            .collect())
    }
}

fn one_hot(c: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[c] = 1.0;
    v
}

/// Out-of-fold predictions from k-fold cross-validation.
#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    /// Mean misclassification rate over folds.
    pub cv_error: f64,
    pub fold_accuracy: Vec<f64>,
    /// Fold of each row.
    pub fold_of: Vec<usize>,
    pub predictions: Vec<usize>,
    pub scores: Vec<Vec<f64>>,
    pub stratified: bool,
}

/// Fold index for each row, stratified by class when every class has at
/// least `folds` members.
pub fn assign_folds(y: &[usize], n_classes: usize, folds: usize, seed: u64) -> (Vec<usize>, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &l) in y.iter().enumerate() {
        by_class[l].push(i);
    }
    let stratified = by_class.iter().all(|c| c.is_empty() || c.len() >= folds);
    let order: Vec<usize> = if stratified {
        by_class
            .into_iter()
            .flat_map(|mut c| {
                c.shuffle(&mut rng);
                c
            })
            .collect()
    } else {
        log::warn!("a class has fewer than {folds} rows; using unstratified folds");
        let mut all: Vec<usize> = (0..y.len()).collect();
        all.shuffle(&mut rng);
        all
    };
    let mut fold_of = vec![0; y.len()];
    for (p, &i) in order.iter().enumerate() {
        fold_of[i] = p % folds;
    }
    (fold_of, stratified)
}

pub fn cross_validate(
    data: &Dataset,
    spec: &ModelSpec,
    folds: usize,
    seed: u64,
) -> Result<CvResult> {
    let n = data.n();
    if folds < 2 || folds > n {
        return Err(Error::input(format!("folds = {folds} must be in 2..={n}")));
    }
    let k = data.n_classes();
    let (fold_of, stratified) = assign_folds(&data.y, k, folds, seed);
    let per_fold = par::map_range(folds, |f| -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let model = spec.fit(&data.subset(&train), seed.wrapping_add(f as u64))?;
        let scores = model.predict_scores(data.x.select(Axis(0), &test).view(), k)?;
        Ok((test, scores))
    });
    let mut predictions = vec![0; n];
    let mut scores = vec![Vec::new(); n];
    let mut fold_accuracy = Vec::with_capacity(folds);
    for res in per_fold {
        let (test, s) = res?;
        let mut hits = 0;
        for (&i, row) in test.iter().zip(s) {
            predictions[i] = argmax(&row);
            hits += usize::from(predictions[i] == data.y[i]);
            scores[i] = row;
        }
        fold_accuracy.push(hits as f64 / test.len() as f64);
    }
    let cv_error = fold_accuracy.iter().map(|a| 1.0 - a).sum::<f64>() / folds as f64;
    Ok(CvResult {
        cv_error,
        fold_accuracy,
        fold_of,
        predictions,
        scores,
        stratified,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    /// `None` when undefined (class absent or never predicted).
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f_measure: Option<f64>,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    /// `None` when the class has no positives or no negatives.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n: usize,
    pub overall_acc: f64,
    pub cv_error: Option<f64>,
    /// Row = truth, column = prediction, as fractions of `n`.
    pub confusion: Array2<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub roc: Vec<RocCurve>,
}

impl EvalReport {
    /// Macro averages over classes where the metric is defined.
    pub fn macro_averages(&self) -> (Option<f64>, Option<f64>, Option<f64>) {
        let avg = |f: fn(&ClassMetrics) -> Option<f64>| {
            let v: Vec<f64> = self.per_class.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        (
            avg(|m| m.precision),
            avg(|m| m.recall),
            avg(|m| m.f_measure),
        )
    }
}

fn roc_curve(scores: &[f64], positive: &[bool]) -> RocCurve {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    if p == 0 || n == 0 {
        points.push(RocPoint {
            fpr: 1.0,
            tpr: 1.0,
            threshold: f64::NEG_INFINITY,
        });
        return RocCurve { points, auc: None };
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold: t,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    RocCurve {
        points,
        auc: Some(auc),
    }
}

/// Confusion matrix, per-class precision/recall/F and one-vs-rest ROC.
///
/// `scores[i][c]` ranks row `i` for class `c`; without scores the ROC uses
/// one-hot predictions.
pub fn evaluate(
    pred: &[usize],
    scores: Option<&[Vec<f64>]>,
    truth: &[usize],
    n_classes: usize,
) -> Result<EvalReport> {
    let n = truth.len();
    if pred.len() != n || scores.is_some_and(|s| s.len() != n) {
        return Err(Error::input("predictions and truth differ in length"));
    }
    if n == 0 {
        return Err(Error::input("nothing to evaluate"));
    }
    if pred.iter().chain(truth).any(|&l| l >= n_classes) {
        return Err(Error::input(format!("label outside {n_classes} classes")));
    }
    let mut counts = Array2::<usize>::zeros((n_classes, n_classes));
    for (&t, &p) in truth.iter().zip(pred) {
        counts[[t, p]] += 1;
    }
    let correct: usize = (0..n_classes).map(|c| counts[[c, c]]).sum();
    let per_class = (0..n_classes)
        .map(|c| {
            let tp = counts[[c, c]];
            let support: usize = counts.row(c).sum();
            let predicted: usize = counts.column(c).sum();
            let (precision, recall) = if support == 0 {
                (None, None)
            } else {
                let p = (predicted > 0).then(|| tp as f64 / predicted as f64);
                (p, Some(tp as f64 / support as f64))
            };
            let f_measure = match (precision, recall) {
                (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
                (Some(_), Some(_)) => Some(0.0),
                _ => None,
            };
            ClassMetrics {
                precision,
                recall,
                f_measure,
                support,
            }
        })
        .collect();
    let roc = (0..n_classes)
        .map(|c| {
            let s: Vec<f64> = match scores {
                Some(s) => s.iter().map(|row| row[c]).collect(),
                None => pred.iter().map(|&p| f64::from(u8::from(p == c))).collect(),
            };
            let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            roc_curve(&s, &pos)
        })
        .collect();
    Ok(EvalReport {
        n,
        overall_acc: correct as f64 / n as f64,
        cv_error: None,
        confusion: counts.mapv(|c| c as f64 / n as f64),
        per_class,
        roc,
    })
}

/// Report for a cross-validation run.
pub fn evaluate_cv(data: &Dataset, cv: &CvResult) -> Result<EvalReport> {
    let mut r = evaluate(&cv.predictions, Some(&cv.scores), &data.y, data.n_classes())?;
    r.cv_error = Some(cv.cv_error);
    Ok(r)
}

/// Uniformly random predictions against the dataset labels.
pub fn baseline_random(data: &Dataset, seed: u64) -> Result<EvalReport> {
    let k = data.n_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred: Vec<usize> = (0..data.n()).map(|_| rng.random_range(0..k)).collect();
    let mut r = evaluate(&pred, None, &data.y, k)?;
    r.cv_error = Some(1.0 - r.overall_acc);
    Ok(r)
}

/// Label for cells no polygon touches.
pub const UNKNOWN_LANDUSE: &str = "unknown";

type Ring = Vec<(f64, f64)>;

fn ring_area(r: &[(f64, f64)]) -> f64 {
    let mut a = 0.0;
    for i in 0..r.len() {
        let (x0, y0) = r[i];
        let (x1, y1) = r[(i + 1) % r.len()];
        a += x0 * y1 - x1 * y0;
    }
    (a / 2.0).abs()
}

/// Sutherland-Hodgman clip of `ring` (open, no repeated end) to a rectangle.
fn clip_to_rect(ring: &[(f64, f64)], (x0, y0, x1, y1): (f64, f64, f64, f64)) -> Ring {
    let mut out: Ring = ring.to_vec();
    let edges: [(usize, f64, bool); 4] =
        [(0, x0, true), (0, x1, false), (1, y0, true), (1, y1, false)];
    for (axis, bound, keep_above) in edges {
        if out.is_empty() {
            break;
        }
        let inside = |p: (f64, f64)| {
            let v = if axis == 0 { p.0 } else { p.1 };
            if keep_above {
                v >= bound
            } else {
                v <= bound
            }
        };
        let cross = |a: (f64, f64), b: (f64, f64)| {
            let (va, vb) = if axis == 0 { (a.0, b.0) } else { (a.1, b.1) };
            let t = (bound - va) / (vb - va);
            if axis == 0 {
                (bound, a.1 + t * (b.1 - a.1))
            } else {
                (a.0 + t * (b.0 - a.0), bound)
            }
        };
        let input = std::mem::take(&mut out);
        for i in 0..input.len() {
            let cur = input[i];
            let prev = input[(i + input.len() - 1) % input.len()];
            match (inside(prev), inside(cur)) {
                (true, true) => out.push(cur),
                (true, false) => out.push(cross(prev, cur)),
                (false, true) => {
                    out.push(cross(prev, cur));
                    out.push(cur);
                }
                (false, false) => {}
            }
        }
    }
    out
}

struct LandPolygon {
    class: String,
    /// Outer ring then holes, in local meters, open.
    rings: Vec<Ring>,
}

impl LandPolygon {
    fn area_in(&self, rect: (f64, f64, f64, f64)) -> f64 {
        let mut a = ring_area(&clip_to_rect(&self.rings[0], rect));
        for hole in &self.rings[1..] {
            a -= ring_area(&clip_to_rect(hole, rect));
        }
        a.max(0.0)
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        let mut b = (
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        );
        for &(x, y) in &self.rings[0] {
            b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
        }
        b
    }
}

fn parse_ring(grid: &GridSpec, v: &serde_json::Value, feature: &str) -> Result<Ring> {
    let bad = |m: &str| Error::InvalidPolygon {
        feature: feature.to_string(),
        message: m.to_string(),
    };
    let pts = v.as_array().ok_or_else(|| bad("ring is not an array"))?;
    let mut ring = Vec::with_capacity(pts.len());
    for p in pts {
        let lon = p.get(0).and_then(|x| x.as_f64());
        let lat = p.get(1).and_then(|x| x.as_f64());
        match (lon, lat) {
            (Some(lon), Some(lat)) if lon.is_finite() && lat.is_finite() => {
                ring.push(grid.to_local(lon, lat))
            }
            _ => return Err(bad("position is not a [lon, lat] pair")),
        }
    }
    if ring.len() < 4 {
        return Err(bad("ring has fewer than 4 positions"));
    }
    if ring.first() != ring.last() {
        return Err(bad("ring is not closed"));
    }
    ring.pop();
    Ok(ring)
}

fn parse_landuse(grid: &GridSpec, geojson: &serde_json::Value) -> Result<Vec<LandPolygon>> {
    let features = geojson
        .get("features")
        .and_then(|f| f.as_array())
        .ok_or_else(|| Error::input("land-use GeoJSON must be a FeatureCollection"))?;
    let mut out = Vec::new();
    for (i, f) in features.iter().enumerate() {
        let name = f
            .get("id")
            .map(|v| v.to_string().trim_matches('"').to_string())
            .unwrap_or_else(|| format!("#{i}"));
        let Some(class) = f.pointer("/properties/landuse").and_then(|v| v.as_str()) else {
            log::warn!("land-use feature {name} has no `landuse` property; skipped");
            continue;
        };
        let geom = f.get("geometry").ok_or_else(|| Error::InvalidPolygon {
            feature: name.clone(),
            message: "missing geometry".into(),
        })?;
        let coords = geom.get("coordinates");
        let polys: Vec<&serde_json::Value> =
            match (geom.get("type").and_then(|t| t.as_str()), coords) {
                (Some("Polygon"), Some(c)) => vec![c],
                (Some("MultiPolygon"), Some(c)) => {
                    c.as_array().map(|a| a.iter().collect()).unwrap_or_default()
                }
                _ => {
                    return Err(Error::InvalidPolygon {
                        feature: name,
                        message: "geometry must be a Polygon or MultiPolygon".into(),
                    })
                }
            };
        for p in polys {
            let rings = p
                .as_array()
                .filter(|r| !r.is_empty())
                .ok_or_else(|| Error::InvalidPolygon {
                    feature: name.clone(),
                    message: "polygon has no rings".into(),
                })?
                .iter()
                .map(|r| parse_ring(grid, r, &name))
                .collect::<Result<Vec<_>>>()?;
            out.push(LandPolygon {
                class: class.to_string(),
                rings,
            });
        }
    }
    Ok(out)
}

/// Land-use class of each cell: the class whose polygons cover the most of
/// its area, ties to the lexicographically first; `unknown` if uncovered.
pub fn landuse_labels(grid: &GridSpec, geojson: &serde_json::Value) -> Result<Vec<String>> {
    let polys = parse_landuse(grid, geojson)?;
    let mut area: Vec<BTreeMap<&str, f64>> = vec![BTreeMap::new(); grid.n_cells()];
    for p in &polys {
        let (bx0, by0, bx1, by1) = p.bbox();
        let c0 = (bx0 / grid.cell_width_m).floor().max(0.0) as usize;
        let r0 = (by0 / grid.cell_height_m).floor().max(0.0) as usize;
        let c1 = ((bx1 / grid.cell_width_m).ceil().max(0.0) as usize).min(grid.n_cols);
        let r1 = ((by1 / grid.cell_height_m).ceil().max(0.0) as usize).min(grid.n_rows);
        for row in r0..r1 {
            for col in c0..c1 {
                let cell = grid.cell(row, col).expect("in range");
                let a = p.area_in(grid.rect_local(cell));
                if a > 0.0 {
                    *area[cell.0].entry(p.class.as_str()).or_default() += a;
                }
            }
        }
    }
    Ok(area
        .into_iter()
        .map(|m| {
            let mut best: Option<(&str, f64)> = None;
            for (c, a) in m {
                if best.is_none_or(|(_, b)| a > b) {
                    best = Some((c, a));
                }
            }
            best.map_or_else(|| UNKNOWN_LANDUSE.to_string(), |(c, _)| c.to_string())
        })
        .collect())
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}%", 100.0 * v))
}

/// Method / cross-validation error / accuracy table.
pub fn format_model_table(rows: &[(String, &EvalReport)]) -> String {
    let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut s = format!("{:<w$}  {:>10}  {:>10}\n", "Method", "CV error", "Accuracy");
    for (name, r) in rows {
        let cv = r
            .cv_error
            .map_or_else(|| "n/a".to_string(), |e| format!("{e:.4}"));
        let _ = writeln!(s, "{name:<w$}  {cv:>10}  {:>10}", pct(Some(r.overall_acc)));
    }
    s
}

/// Confusion matrix in percent followed by precision/recall/F rows.
pub fn format_confusion_table(r: &EvalReport, class_names: &[String]) -> String {
    let w = class_names
        .iter()
        .map(String::len)
        .max()
        .unwrap_or(0)
        .max(9);
    let mut s = format!("{:<w$}", "truth\\pred");
    for c in class_names {
        let _ = write!(s, "  {c:>w$}");
    }
    s.push('\n');
    for (i, c) in class_names.iter().enumerate() {
        let _ = write!(s, "{c:<w$}");
        for j in 0..class_names.len() {
            let _ = write!(
                s,
                "  {:>w$}",
                format!("{:.2}%", 100.0 * r.confusion[[i, j]])
            );
        }
        s.push('\n');
    }
    type Pick = fn(&ClassMetrics) -> Option<f64>;
    let rows: [(&str, Pick); 3] = [
        ("precision", |m| m.precision),
        ("recall", |m| m.recall),
        ("f-measure", |m| m.f_measure),
    ];
    for (label, f) in rows {
        let _ = write!(s, "{label:<w$}");
        for m in &r.per_class {
            let _ = write!(s, "  {:>w$}", pct(f(m)));
        }
        s.push('\n');
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

/// `truth,predicted,fraction` rows, then `class,precision,recall,f_measure,support`.
pub fn write_eval_csv<W: Write>(r: &EvalReport, class_names: &[String], mut out: W) -> Result<()> {
    writeln!(out, "truth,predicted,fraction")?;
    for (i, a) in class_names.iter().enumerate() {
        for (j, b) in class_names.iter().enumerate() {
            writeln!(out, "{a},{b},{}", r.confusion[[i, j]])?;
        }
    }
    writeln!(out)?;
    writeln!(out, "class,precision,recall,f_measure,support")?;
    for (c, m) in class_names.iter().zip(&r.per_class) {
        writeln!(
            out,
            "{c},{},{},{},{}",
            opt(m.precision),
            opt(m.recall),
            opt(m.f_measure),
            m.support
        )?;
    }
    Ok(())
}

pub fn write_roc_csv<W: Write>(r: &EvalReport, class_names: &[String], mut out: W) -> Result<()> {
    writeln!(out, "class,fpr,tpr,threshold")?;
    for (c, curve) in class_names.iter().zip(&r.roc) {
        for p in &curve.points {
            writeln!(out, "{c},{},{},{}", p.fpr, p.tpr, p.threshold)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn six_points() -> Dataset {
        let x = array![
            [0.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [5.0, 5.0],
            [6.0, 5.0],
            [2.0, 2.0]
        ];
        Dataset::new(x, vec![0, 0, 0, 1, 1, 1], names(2)).unwrap()
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(array![[1.0]], vec![0, 1], names(2)).is_err());
        assert!(Dataset::new(array![[1.0], [2.0]], vec![0, 0], names(2)).is_err());
        assert!(Dataset::new(array![[1.0], [2.0]], vec![0, 2], names(2)).is_err());
        assert!(Dataset::new(array![[f64::NAN], [2.0]], vec![0, 1], names(2)).is_err());
    }

    #[test]
    fn knn_hand_fixture() {
        let d = six_points();
        // from (2.5, 2.5): (2,2) d2=0.5, (0,1) 8.5, (1,0) 8.5, (5,5) 12.5
        let (l, s) = knn_classify(&d, array![2.5, 2.5].view(), 3).unwrap();
        assert_eq!(l, 0);
        assert_eq!(s, vec![2.0 / 3.0, 1.0 / 3.0]);
        let (l, _) = knn_classify(&d, array![4.0, 4.0].view(), 3).unwrap();
        assert_eq!(l, 1);
        let (l, _) = knn_classify(&d, array![5.0, 5.0].view(), 1).unwrap();
        assert_eq!(l, 1);
        // k = n gives the global majority; 3 vs 3 ties to class 0
        assert_eq!(knn_classify(&d, array![9.0, 9.0].view(), 6).unwrap().0, 0);
        assert!(knn_classify(&d, array![0.0, 0.0].view(), 7).is_err());
    }

    #[test]
    fn tree_separates_at_five() {
        let x = Array2::from_shape_fn(
            (10, 1),
            |(i, _)| if i < 5 { i as f64 } else { i as f64 + 2.0 },
        );
        let y: Vec<usize> = (0..10).map(|i| usize::from(i >= 5)).collect();
        let d = Dataset::new(x, y, names(2)).unwrap();
        let t = decision_tree_fit(&d, TreeParams::default());
        match &t.nodes[0] {
            TreeNode::Split { threshold, .. } => assert!(*threshold > 4.0 && *threshold < 7.0),
            other => panic!("expected split, got {other:?}"),
        }
        let m = Model::Tree(t);
        assert_eq!(m.predict(d.x.view(), 2).unwrap(), d.y);
    }

    #[test]
    fn tree_pure_and_stump() {
        let d = Dataset::new(array![[1.0], [2.0]], vec![0, 0], vec!["a".into()]).unwrap();
        assert_eq!(decision_tree_fit(&d, TreeParams::default()).nodes.len(), 1);
        let d = six_points();
        let t = decision_tree_fit(
            &d,
            TreeParams {
                max_depth: Some(0),
                min_leaf: 1,
            },
        );
        assert_eq!(
            t.nodes,
            vec![TreeNode::Leaf {
                dist: vec![0.5, 0.5]
            }]
        );
    }

    #[test]
    fn degenerate_forest_is_a_tree() {
        let d = six_points();
        let tree = decision_tree_fit(&d, TreeParams::default());
        let f = random_forest_fit(
            &d,
            ForestParams {
                n_trees: 1,
                mtry: Some(2),
                bootstrap: false,
                ..Default::default()
            },
            5,
        )
        .unwrap();
        assert_eq!(f.trees[0], tree);
    }

    #[test]
    fn forest_is_deterministic() {
        let x = Array2::from_shape_fn((40, 3), |(i, j)| ((i * 13 + j * 7) % 11) as f64);
        let y: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let d = Dataset::new(x, y, names(3)).unwrap();
        let p = ForestParams {
            n_trees: 8,
            ..Default::default()
        };
        let a = random_forest_fit(&d, p, 3).unwrap();
        assert_eq!(a, random_forest_fit(&d, p, 3).unwrap());
        assert_eq!(a, par::sequential(|| random_forest_fit(&d, p, 3).unwrap()));
    }

    #[test]
    fn folds_are_stratified_and_reproducible() {
        let y: Vec<usize> = (0..53)
            .map(|i| {
                if i < 30 {
                    0
                } else if i < 45 {
                    1
                } else {
                    2
                }
            })
            .collect();
        let (f, strat) = assign_folds(&y, 3, 5, 8);
        assert!(strat);
        assert_eq!(f, assign_folds(&y, 3, 5, 8).0);
        for c in 0..3 {
            let per: Vec<usize> = (0..5)
                .map(|k| (0..53).filter(|&i| y[i] == c && f[i] == k).count())
                .collect();
            let mx = per.iter().max().unwrap();
            let mn = per.iter().min().unwrap();
            assert!(mx - mn <= 1, "{per:?}");
        }
        let (_, strat) = assign_folds(&[0, 0, 0, 1], 2, 3, 0);
        assert!(!strat);
    }

    #[test]
    fn cv_majority_and_duplicates() {
        let x = Array2::from_shape_fn((40, 1), |(i, _)| i as f64);
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let d = Dataset::new(x, y, names(2)).unwrap();
        let cv = cross_validate(&d, &ModelSpec::Majority, 10, 1).unwrap();
        assert!((cv.cv_error - 0.5).abs() < 0.15);
        let x = Array2::from_shape_fn((40, 2), |(i, j)| ((i % 10) * (j + 1)) as f64);
        let y: Vec<usize> = (0..40).map(|i| usize::from(i % 10 >= 5)).collect();
        let d = Dataset::new(x, y, names(2)).unwrap();
        let cv = cross_validate(&d, &ModelSpec::Knn { k: 1 }, 4, 2).unwrap();
        assert_eq!(cv.cv_error, 0.0);
    }

    #[test]
    fn hand_metric_fixture() {
        // class 1 is positive: TP=4 FP=1 FN=2 TN=3
        let truth = [1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
        let pred = [1, 1, 1, 1, 0, 0, 1, 0, 0, 0];
        let r = evaluate(&pred, None, &truth, 2).unwrap();
        let m = r.per_class[1];
        assert_eq!(m.precision, Some(0.8));
        assert_eq!(m.recall, Some(4.0 / 6.0));
        assert!((m.f_measure.unwrap() - 0.727_272_727_272_727_3).abs() < 1e-12);
        assert!((r.confusion.sum() - 1.0).abs() < 1e-12);
        assert_eq!(r.overall_acc, 0.7);
    }

    #[test]
    fn perfect_predictions() {
        let t = [0, 1, 2, 2, 1, 0];
        let scores: Vec<Vec<f64>> = t.iter().map(|&c| one_hot(c, 3)).collect();
        let r = evaluate(&t, Some(&scores), &t, 3).unwrap();
        assert_eq!(r.overall_acc, 1.0);
        for c in 0..3 {
            assert_eq!(r.per_class[c].f_measure, Some(1.0));
            assert_eq!(r.roc[c].auc, Some(1.0));
            let p = &r.roc[c].points;
            assert_eq!((p[0].fpr, p[0].tpr), (0.0, 0.0));
            assert_eq!((p.last().unwrap().fpr, p.last().unwrap().tpr), (1.0, 1.0));
        }
    }

    #[test]
    fn absent_class_is_not_applicable() {
        let r = evaluate(&[0, 1, 1], None, &[0, 1, 1], 3).unwrap();
        assert_eq!(r.per_class[2].precision, None);
        assert_eq!(r.per_class[2].recall, None);
        assert_eq!(r.macro_averages().2, Some(1.0));
    }

    #[test]
    fn random_baseline_near_chance() {
        let x = Array2::zeros((10_000, 1));
        let y: Vec<usize> = (0..10_000).map(|i| i % 6).collect();
        let d = Dataset::new(x, y, names(6)).unwrap();
        let r = baseline_random(&d, 4).unwrap();
        let p: f64 = 1.0 / 6.0;
        let sigma = (p * (1.0 - p) / 10_000.0).sqrt();
        assert!((r.overall_acc - p).abs() <= 3.0 * sigma);
    }

    fn square(x0: f64, y0: f64, x1: f64, y1: f64) -> serde_json::Value {
        serde_json::json!([[[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]])
    }

    #[test]
    fn clipping_area() {
        let tri = vec![(-1.0, 0.5), (2.0, 0.5), (0.5, 3.0)];
        let a = ring_area(&clip_to_rect(&tri, (0.0, 0.0, 1.0, 1.0)));
        assert!((a - 0.5).abs() < 1e-12);
        // x + y <= 1.5 cuts a corner of area 1/8 off the unit square
        let tri = vec![(0.0, 0.0), (1.5, 0.0), (0.0, 1.5)];
        let a = ring_area(&clip_to_rect(&tri, (0.0, 0.0, 1.0, 1.0)));
        assert!((a - 0.875).abs() < 1e-12);
    }

    #[test]
    fn landuse_split_cell() {
        let grid = GridSpec::new(0.0, 0.0, 100.0, 100.0, 1, 1).unwrap();
        let (lon1, lat1) = grid.to_geo(100.0, 100.0);
        let (lon6, _) = grid.to_geo(60.0, 0.0);
        let gj = serde_json::json!({"type": "FeatureCollection", "features": [
            {"type": "Feature", "properties": {"landuse": "retail"},
             "geometry": {"type": "Polygon", "coordinates": square(0.0, 0.0, lon6, lat1)}},
            {"type": "Feature", "properties": {"landuse": "commercial"},
             "geometry": {"type": "Polygon", "coordinates": square(lon6, 0.0, lon1, lat1)}},
        ]});
        assert_eq!(
            landuse_labels(&grid, &gj).unwrap(),
            vec!["retail".to_string()]
        );
        let empty = serde_json::json!({"type": "FeatureCollection", "features": []});
        assert_eq!(
            landuse_labels(&grid, &empty).unwrap(),
            vec![UNKNOWN_LANDUSE.to_string()]
        );
    }

    #[test]
    fn landuse_hole_and_errors() {
        let grid = GridSpec::new(0.0, 0.0, 100.0, 100.0, 3, 1).unwrap();
        let (lon3, lat1) = grid.to_geo(300.0, 100.0);
        let (lon1, _) = grid.to_geo(100.0, 0.0);
        let (lon2, _) = grid.to_geo(200.0, 0.0);
        let mut rings = square(0.0, 0.0, lon3, lat1);
        rings
            .as_array_mut()
            .unwrap()
            .push(square(lon1, 0.0, lon2, lat1)[0].clone());
        let gj = serde_json::json!({"type": "FeatureCollection", "features": [
            {"type": "Feature", "properties": {"landuse": "residential"},
             "geometry": {"type": "Polygon", "coordinates": rings}}]});
        let l = landuse_labels(&grid, &gj).unwrap();
        assert_eq!(l, vec!["residential", UNKNOWN_LANDUSE, "residential"]);
        let bad = serde_json::json!({"type": "FeatureCollection", "features": [
            {"id": "w1", "type": "Feature", "properties": {"landuse": "x"},
             "geometry": {"type": "Polygon", "coordinates": [[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]]}}]});
        match landuse_labels(&grid, &bad) {
            Err(Error::InvalidPolygon { feature, .. }) => assert_eq!(feature, "w1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn report_text_and_csv() {
        let r = evaluate(&[0, 1, 1, 0], None, &[0, 1, 0, 0], 2).unwrap();
        let n = names(2);
        let t = format_confusion_table(&r, &n);
        assert!(t.contains("50.00%"));
        assert!(t.contains("precision"));
        let mut buf = Vec::new();
        write_roc_csv(&r, &n, &mut buf).unwrap();
        assert!(String::from_utf8(buf)
            .unwrap()
            .starts_with("class,fpr,tpr,threshold\nc0,0,0,inf\n"));
        let table = format_model_table(&[("5-NN".into(), &r)]);
        assert!(table.contains("75.00%"));
    }
}
