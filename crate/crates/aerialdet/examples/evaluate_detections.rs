//! Detection scoring, from the primitive pieces to the full per-class
//! report: greedy score-ordered matching at an IoU threshold, the running
//! precision/recall curve, interpolated average precision, and the
//! category-by-category table with its mean.
//!
//! Run with: cargo run --example evaluate_detections

use aerialdet::dota::{Detection, Hbb};
use aerialdet::eval::{
    average_precision, evaluate, iou_hbb, match_detections, precision_recall, ApMethod,
    GroundTruth, MatchFlag,
};

fn main() {
    // --- the primitives on a three-detection example ---------------------
    let gts = [
        (Hbb::new(10.0, 10.0, 50.0, 50.0), false),
        (Hbb::new(100.0, 100.0, 160.0, 140.0), false),
    ];
    let dets = [
        (0.95, Hbb::new(12.0, 11.0, 51.0, 49.0)),   // good hit on gt 0
        (0.80, Hbb::new(200.0, 200.0, 240.0, 240.0)), // background
        (0.60, Hbb::new(98.0, 102.0, 158.0, 139.0)), // good hit on gt 1
    ];
    println!("IoU(det 0, gt 0) = {:.3}", iou_hbb(&dets[0].1, &gts[0].0));

    let flags = match_detections(&dets, &gts, 0.5);
    assert_eq!(flags, vec![MatchFlag::Tp, MatchFlag::Fp, MatchFlag::Tp]);
    println!("match flags (by descending score): {flags:?}");

    let (precision, recall) = precision_recall(&flags, gts.len());
    for i in 0..flags.len() {
        println!("  after det {i}: precision {:.3}, recall {:.3}", precision[i], recall[i]);
    }

    // Eleven-point interpolation averages the best precision achievable at
    // recalls 0.0, 0.1, ..., 1.0. Here: six points see precision 1, five see
    // 2/3, so AP = (6 + 5 * 2/3) / 11 = 28/33.
    let ap11 = average_precision(&precision, &recall, ApMethod::ElevenPoint);
    let ap_all = average_precision(&precision, &recall, ApMethod::AllPoint);
    println!("eleven-point AP = {ap11:.6} (= 28/33), area-under-curve AP = {ap_all:.6}");
    assert!((ap11 - 28.0 / 33.0).abs() < 1e-12);

    // --- the full report on a two-category scene -------------------------
    let gt = |image: &str, cat: &str, b: Hbb, difficult: bool| GroundTruth {
        image_id: image.into(),
        category: cat.into(),
        bbox: b,
        difficult,
    };
    let det = |image: &str, cat: &str, score: f64, b: Hbb| Detection {
        image_id: image.into(),
        category: cat.into(),
        score,
        bbox: b,
    };
    let ground_truth = vec![
        gt("img1", "plane", Hbb::new(0.0, 0.0, 40.0, 40.0), false),
        gt("img1", "plane", Hbb::new(60.0, 0.0, 100.0, 40.0), false),
        gt("img2", "ship", Hbb::new(10.0, 10.0, 30.0, 50.0), false),
        // Difficult boxes never count as positives; hitting one is neither
        // rewarded nor punished.
        gt("img2", "ship", Hbb::new(70.0, 70.0, 90.0, 110.0), true),
    ];
    let detections = vec![
        det("img1", "plane", 0.9, Hbb::new(1.0, 1.0, 41.0, 41.0)),
        det("img1", "plane", 0.7, Hbb::new(61.0, 1.0, 99.0, 39.0)),
        det("img2", "ship", 0.8, Hbb::new(11.0, 11.0, 29.0, 49.0)),
        det("img2", "ship", 0.6, Hbb::new(71.0, 71.0, 89.0, 109.0)), // difficult hit, ignored
        det("img2", "ship", 0.5, Hbb::new(200.0, 200.0, 220.0, 220.0)), // false positive
    ];
    let report = evaluate(
        &detections,
        &ground_truth,
        &["plane", "ship", "harbor"],
        0.5,
        ApMethod::ElevenPoint,
    );
    println!("\n{}", report.render_text());
    println!("CSV form:\n{}", report.render_csv());
    // plane: both hits clean -> AP 1. ship: TP then an ignored difficult
    // match then an FP after full recall -> AP 1. harbor: no boxes on either
    // side -> excluded from the mean rather than scored 0.
    assert_eq!(report.mean_ap, 1.0);
}
