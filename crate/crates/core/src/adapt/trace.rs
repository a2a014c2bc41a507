use serde::{Deserialize, Serialize};

use crate::boxes::EvalResult;
use crate::detector::LossBreakdown;

/// One trace row per optimizer step; step 0 holds the initial evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub losses: Option<LossBreakdown>,
    pub num_pls: Option<usize>,
    pub eval: Option<EvalResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub rows: Vec<TraceRow>,
}

pub const TRACE_COLUMNS: [&str; 8] = ["step", "total_loss", "rpn_cls", "rpn_reg", "roi_cls", "roi_reg", "num_pls", "map"];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl AdaptTrace {
    /// `(step, mAP)` of every evaluated row.
    pub fn evaluations(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows.iter().filter_map(|r| r.eval.as_ref().map(|e| (r.step, e.map)))
    }

    /// First evaluated row with the highest mAP.
    pub fn peak(&self) -> Option<(usize, f64)> {
        self.evaluations().fold(None, |best, (s, m)| match best {
            Some((_, bm)) if bm >= m => best,
            _ => Some((s, m)),
        })
    }

    pub fn last_evaluation(&self) -> Option<(usize, f64)> {
        self.evaluations().last()
    }

    /// CSV with columns [`TRACE_COLUMNS`] followed by `ap_class{i}`; fields
    /// that were not measured at a step are left empty.
    pub fn to_csv(&self, num_classes: usize) -> String {
        let mut header: Vec<String> = TRACE_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend((0..num_classes).map(|c| format!("ap_class{c}")));
        let mut out = header.join(",");
        out.push('\n');
        for r in &self.rows {
            let l = r.losses.as_ref();
            let mut fields = vec![
                r.step.to_string(),
                opt(l.map(|l| l.total)),
                opt(l.map(|l| l.rpn_cls)),
                opt(l.map(|l| l.rpn_reg)),
                opt(l.map(|l| l.roi_cls)),
                opt(l.map(|l| l.roi_reg)),
                opt(r.num_pls),
                opt(r.eval.as_ref().map(|e| e.map)),
            ];
            for c in 0..num_classes {
                fields.push(opt(r.eval.as_ref().and_then(|e| e.per_class_ap.get(c).copied().flatten())));
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }

    /// Inverse of [`AdaptTrace::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or("empty trace")?.split(',').collect();
        if header.len() < TRACE_COLUMNS.len() || header[..TRACE_COLUMNS.len()] != TRACE_COLUMNS {
            return Err(format!("unexpected trace header {header:?}"));
        }
        let classes = header.len() - TRACE_COLUMNS.len();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != header.len() {
                return Err(format!("row {}: {} fields, expected {}", n + 1, f.len(), header.len()));
            }
            let num = |s: &str| -> Result<Option<f64>, String> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| format!("row {}: bad number {s:?}", n + 1))
                }
            };
            let step = f[0].parse().map_err(|_| format!("row {}: bad step {:?}", n + 1, f[0]))?;
            let losses = match (num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?, num(f[5])?) {
                (Some(total), Some(rpn_cls), Some(rpn_reg), Some(roi_cls), Some(roi_reg)) => Some(LossBreakdown {
                    rpn_cls,
                    rpn_reg,
                    roi_cls,
                    roi_reg,
                    total,
                }),
                _ => None,
            };
            let num_pls = num(f[6])?.map(|v| v as usize);
            let eval = match num(f[7])? {
                Some(map) => Some(EvalResult {
                    per_class_ap: (0..classes).map(|c| num(f[TRACE_COLUMNS.len() + c])).collect::<Result<_, _>>()?,
                    map,
                }),
                None => None,
            };
            rows.push(TraceRow { step, losses, num_pls, eval });
        }
        Ok(Self { rows })
    }
}
