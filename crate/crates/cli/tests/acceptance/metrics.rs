//! Hand-computed metric values.

use attnvat::eval::{extract_hard_rationale, f1_score, hard_rationale_metrics, pearson, soft_rationale_metrics};

const TOL: f64 = 1e-9;

fn mask(bits: &[u8]) -> Vec<bool> {
    bits.iter().map(|&b| b == 1).collect()
}

pub fn criterion() -> Result<String, String> {
    let mut cases: Vec<(String, f64, f64)> = Vec::new();
    let mut add = |name: &str, got: f64, want: f64| cases.push((name.to_string(), got, want));

    add("f1 identical", f1_score(&[1, 0, 1], &[1, 0, 1]).unwrap().f1, 1.0);
    add("f1 P=1/2 R=1", f1_score(&[1, 1, 0], &[1, 0, 0]).unwrap().f1, 2.0 / 3.0);
    let degenerate = f1_score(&[0, 0], &[0, 0]).unwrap();
    add(
        "f1 no positives",
        degenerate.f1 + f64::from(u8::from(!degenerate.degenerate)),
        0.0,
    );
    add("f1 P=R=1/2", f1_score(&[1, 0, 0, 1], &[0, 1, 0, 1]).unwrap().f1, 0.5);
    add(
        "f1 nothing predicted",
        f1_score(&[0, 0, 0], &[1, 1, 0]).unwrap().f1,
        0.0,
    );

    add(
        "pearson y=2x",
        pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap(),
        1.0,
    );
    add(
        "pearson reversed",
        pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(),
        -1.0,
    );
    add(
        "pearson [1,2,3]~[1,1,2]",
        pearson(&[1.0, 2.0, 3.0], &[1.0, 1.0, 2.0]).unwrap(),
        3f64.sqrt() / 2.0,
    );
    add(
        "pearson [1,2,3,4]~[1,3,2,4]",
        pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(),
        0.8,
    );

    let hard = |p: &[(usize, usize)], g: &[(usize, usize)], len| hard_rationale_metrics(p, g, len).unwrap();
    let h = hard(&[(1, 3)], &[(1, 3)], 5);
    add("iou f1 identical", h.iou_f1, 1.0);
    add("token f1 identical", h.token_f1, 1.0);
    let h = hard(&[(0, 2)], &[(0, 1)], 4);
    add("iou f1 at IOU 0.5", h.iou_f1, 1.0);
    add("token f1 [0,2) vs [0,1)", h.token_f1, 2.0 / 3.0);
    let h = hard(&[(0, 1)], &[(2, 3)], 4);
    add("iou f1 disjoint", h.iou_f1, 0.0);
    add("token f1 disjoint", h.token_f1, 0.0);
    let h = hard(&[(0, 3)], &[(0, 1)], 4);
    add("iou f1 at IOU 1/3", h.iou_f1, 0.0);
    add("token f1 [0,3) vs [0,1)", h.token_f1, 0.5);
    let h = hard(&[(0, 2), (4, 6)], &[(0, 2)], 6);
    add("iou f1 extra predicted span", h.iou_f1, 2.0 / 3.0);
    add("token f1 extra predicted span", h.token_f1, 2.0 / 3.0);
    let h = hard(&[(0, 2)], &[(0, 2), (4, 5)], 6);
    add("iou f1 missed gold span", h.iou_f1, 2.0 / 3.0);
    add("token f1 missed gold span", h.token_f1, 0.8);

    let soft = |s: &[f64], m: &[u8]| soft_rationale_metrics(s, &mask(m)).unwrap();
    let s = soft(&[0.9, 0.1, 0.8, 0.2], &[1, 0, 1, 0]);
    add("roc perfect ranking", s.roc_auc, 1.0);
    add("ap perfect ranking", s.average_precision, 1.0);
    add("auprc perfect ranking", s.auprc, 1.0);
    let s = soft(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]);
    add("roc all tied", s.roc_auc, 0.5);
    add("ap all tied", s.average_precision, 0.5);
    add("auprc all tied", s.auprc, 0.75);
    let s = soft(&[0.1, 0.9, 0.8, 0.2], &[1, 0, 1, 0]);
    add("roc interleaved", s.roc_auc, 0.25);
    add("ap interleaved", s.average_precision, 0.5);
    add("auprc interleaved", s.auprc, 1.0 / 3.0);
    let s = soft(&[3.0, 1.0, 2.0], &[0, 1, 1]);
    add("roc inverted", s.roc_auc, 0.0);
    add("ap inverted", s.average_precision, 7.0 / 12.0);
    add("auprc inverted", s.auprc, 5.0 / 12.0);
    let s = soft(&[0.5, 0.5, 0.2], &[1, 0, 0]);
    add("roc partial tie", s.roc_auc, 0.75);
    add("ap partial tie", s.average_precision, 0.5);
    add("auprc partial tie", s.auprc, 0.75);

    let mismatch = |importance: &[f64], q: f64, want: &[(usize, usize)]| {
        f64::from(u8::from(extract_hard_rationale(importance, q) != want))
    };
    add(
        "hard rationale [0,0,9,9,0] q=0.5",
        mismatch(&[0.0, 0.0, 9.0, 9.0, 0.0], 0.5, &[(2, 4)]),
        0.0,
    );
    add(
        "hard rationale uniform",
        mismatch(&[1.0, 1.0, 1.0], 0.8, &[(0, 3)]),
        0.0,
    );
    add(
        "hard rationale one dominant",
        mismatch(&[0.0, 5.0, 0.0, 0.0], 0.8, &[(1, 2)]),
        0.0,
    );

    let failed: Vec<String> = cases
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > TOL)
        .map(|(name, got, want)| format!("{name}: got {got}, expected {want}"))
        .collect();
    if failed.is_empty() {
        Ok(format!("{} hand-computed cases within {TOL:e}", cases.len()))
    } else {
        Err(failed.join("; "))
    }
}
