//! AUC and per-domain metric reports.

use std::fmt::Write as _;

use crate::error::Result;
use crate::features::Instance;
use crate::model::MmnModel;

/// Rows scored per prediction call when building a report.
const EVAL_CHUNK: usize = 4096;

/// Area under the ROC curve via the rank-sum (Mann–Whitney) statistic with
/// mid-ranks for ties. `None` unless there is at least one positive and one
/// negative.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].total_cmp(&scores[order[i]]).is_eq() {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let mid = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count();
        pos_rank_sum += mid * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Quadratic pairwise AUC, the reference definition.
pub fn auc_pairwise(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

/// Metrics of one group of impressions (a type, a scenario or a domain).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMetrics {
    pub label: String,
    pub impressions: usize,
    pub clicks: usize,
    pub conversions: usize,
    /// CVR AUC on clicked impressions.
    pub auc: Option<f64>,
    /// CTCVR AUC (`p_ctr · p_cvr` against click-and-convert) on all
    /// impressions; absent for models without a CTR tower.
    pub ctcvr_auc: Option<f64>,
}

impl GroupMetrics {
    pub fn empirical_cvr(&self) -> Option<f64> {
        (self.clicks > 0).then(|| self.conversions as f64 / self.clicks as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mode: String,
    pub per_type: Vec<GroupMetrics>,
    pub per_scenario: Vec<GroupMetrics>,
    pub per_domain: Vec<GroupMetrics>,
    pub overall: GroupMetrics,
    /// Mean of every defined type and scenario AUC.
    pub average_auc: Option<f64>,
    pub parameter_set_count: usize,
    pub dataset_count: usize,
}

/// Scores of every instance, in order.
pub fn score(model: &MmnModel, instances: &[Instance]) -> Result<(Option<Vec<f64>>, Vec<f64>)> {
    let mut p_ctr = model.ctr_tower().map(|_| Vec::with_capacity(instances.len()));
    let mut p_cvr = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(EVAL_CHUNK) {
        let p = model.predict_instances(chunk)?;
        if let (Some(all), Some(part)) = (p_ctr.as_mut(), p.p_ctr) {
            all.extend(part);
        }
        p_cvr.extend(p.p_cvr);
    }
    Ok((p_ctr, p_cvr))
}

fn group_metrics(
    label: String,
    members: &[usize],
    instances: &[Instance],
    p_ctr: Option<&[f64]>,
    p_cvr: &[f64],
) -> GroupMetrics {
    let clicked: Vec<usize> = members.iter().copied().filter(|&i| instances[i].click).collect();
    let cvr_scores: Vec<f64> = clicked.iter().map(|&i| p_cvr[i]).collect();
    let cvr_labels: Vec<bool> = clicked.iter().map(|&i| instances[i].conversion).collect();
    let ctcvr_auc = p_ctr.and_then(|p| {
        let s: Vec<f64> = members.iter().map(|&i| p[i] * p_cvr[i]).collect();
        let l: Vec<bool> = members.iter().map(|&i| instances[i].click && instances[i].conversion).collect();
        auc(&s, &l)
    });
    GroupMetrics {
        label,
        impressions: members.len(),
        clicks: clicked.len(),
        conversions: cvr_labels.iter().filter(|&&c| c).count(),
        auc: auc(&cvr_scores, &cvr_labels),
        ctcvr_auc,
    }
}

/// Mean of the defined values, summed in order; `None` if none is defined.
pub fn average_defined<'a>(groups: impl IntoIterator<Item = &'a GroupMetrics>) -> Option<f64> {
    let (sum, n) = groups
        .into_iter()
        .filter_map(|g| g.auc)
        .fold((0.0, 0usize), |(s, n), a| (s + a, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn report(model: &MmnModel, instances: &[Instance]) -> Result<MetricsReport> {
    let (p_ctr, p_cvr) = score(model, instances)?;
    Ok(report_from_scores(model, instances, p_ctr.as_deref(), &p_cvr))
}

pub fn report_from_scores(
    model: &MmnModel,
    instances: &[Instance],
    p_ctr: Option<&[f64]>,
    p_cvr: &[f64],
) -> MetricsReport {
    let reg = model.registry();
    let mut by_type = vec![Vec::new(); reg.num_types()];
    let mut by_scenario = vec![Vec::new(); reg.num_scenarios()];
    let mut by_domain = vec![Vec::new(); reg.num_domains()];
    for (i, inst) in instances.iter().enumerate() {
        by_type[inst.domain.type_idx].push(i);
        by_scenario[inst.domain.scenario_idx].push(i);
        by_domain[reg.flat_index(inst.domain)].push(i);
    }
    let per_type: Vec<GroupMetrics> = by_type
        .iter()
        .enumerate()
        .map(|(t, m)| group_metrics(reg.type_code(t).to_string(), m, instances, p_ctr, p_cvr))
        .collect();
    let per_scenario: Vec<GroupMetrics> = by_scenario
        .iter()
        .enumerate()
        .map(|(s, m)| group_metrics(reg.scenario_code(s).to_string(), m, instances, p_ctr, p_cvr))
        .collect();
    let per_domain = by_domain
        .iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(f, m)| group_metrics(reg.domain_label(reg.from_flat(f)), m, instances, p_ctr, p_cvr))
        .collect();
    let all: Vec<usize> = (0..instances.len()).collect();
    let overall = group_metrics("all".into(), &all, instances, p_ctr, p_cvr);
    let average_auc = average_defined(per_type.iter().chain(&per_scenario));
    MetricsReport {
        mode: model.mode().name().to_string(),
        per_type,
        per_scenario,
        per_domain,
        overall,
        average_auc,
        parameter_set_count: model.parameter_set_count(),
        dataset_count: 1,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

fn opt4(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"))
}

impl MetricsReport {
    /// Average of the defined CVR AUCs of the domains in `domains` (labels as
    /// produced by the registry).
    pub fn domain_average(&self, labels: &[String]) -> Option<f64> {
        average_defined(self.per_domain.iter().filter(|g| labels.contains(&g.label)))
    }

    pub fn domain(&self, label: &str) -> Option<&GroupMetrics> {
        self.per_domain.iter().find(|g| g.label == label)
    }

    /// Aligned plain-text tables.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode: {}", self.mode);
        let _ = writeln!(out, "average AUC (types and scenarios): {}", opt4(self.average_auc));
        let _ = writeln!(out, "CVR parameter sets: {}", self.parameter_set_count);
        let _ = writeln!(out, "datasets: {}", self.dataset_count);
        for (title, groups) in [
            ("type", &self.per_type),
            ("scenario", &self.per_scenario),
            ("domain", &self.per_domain),
        ] {
            let width = groups.iter().map(|g| g.label.len()).max().unwrap_or(0).max(title.len());
            let _ = writeln!(
                out,
                "\n{title:<width$}  {:>11}  {:>8}  {:>8}  {:>8}  {:>8}  {:>9}",
                "impressions", "clicks", "conv", "cvr", "auc", "ctcvr_auc"
            );
            for g in groups.iter().chain(std::iter::once(&self.overall)) {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:>11}  {:>8}  {:>8}  {:>8}  {:>8}  {:>9}",
                    g.label,
                    g.impressions,
                    g.clicks,
                    g.conversions,
                    opt4(g.empirical_cvr()),
                    opt4(g.auc),
                    opt4(g.ctcvr_auc),
                );
            }
        }
        out
    }

    /// One `key = value` metric per line, floats in shortest round-trip form.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode = {}", self.mode);
        let _ = writeln!(out, "average_auc = {}", opt(self.average_auc));
        let _ = writeln!(out, "parameter_set_count = {}", self.parameter_set_count);
        let _ = writeln!(out, "dataset_count = {}", self.dataset_count);
        for (prefix, groups) in [
            ("type", &self.per_type),
            ("scenario", &self.per_scenario),
            ("domain", &self.per_domain),
            ("overall", &vec![self.overall.clone()]),
        ] {
            for g in groups {
                let key = if prefix == "overall" {
                    prefix.to_string()
                } else {
                    format!("{prefix}.{}", g.label)
                };
                let _ = writeln!(out, "{key}.impressions = {}", g.impressions);
                let _ = writeln!(out, "{key}.clicks = {}", g.clicks);
                let _ = writeln!(out, "{key}.conversions = {}", g.conversions);
                let _ = writeln!(out, "{key}.cvr = {}", opt(g.empirical_cvr()));
                let _ = writeln!(out, "{key}.auc = {}", opt(g.auc));
                let _ = writeln!(out, "{key}.ctcvr_auc = {}", opt(g.ctcvr_auc));
            }
        }
        out
    }
}
