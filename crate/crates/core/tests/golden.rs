//! Mid-block activation statistics pinned against values recorded on first run.
//! Delete `tests/golden/mid_stats.json` (or set `CTRLDIFF_BLESS=1`) to re-record.

use std::path::PathBuf;

use ctrldiff::backbone::{build_backbone, BackboneConfig};
use ctrldiff::finetune::{gaussian, item_rng};
use serde_json::{json, Value};

fn stats() -> Value {
    let cfg = BackboneConfig::default();
    let (bb, _, port) = build_backbone(&cfg, 0).unwrap();
    let x = gaussian(&mut item_rng(7, 0), [2, 1, cfg.image_size, cfg.image_size]);
    let mid = bb.read_mid_features(&x, &[1, 500]).unwrap();
    assert_eq!(mid.shape(), port.shape(2));
    let n = mid.numel() as f64;
    let mean = mid.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = mid
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let out = bb.forward(&x, &[1, 500], None).unwrap();
    let out_mean = out.data().iter().map(|&v| v as f64).sum::<f64>() / out.numel() as f64;
    json!({ "mid_mean": mean, "mid_variance": var, "output_mean": out_mean })
}

#[test]
fn mid_block_statistics_match_the_recorded_values() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/mid_stats.json");
    let now = stats();
    if !path.exists() || std::env::var_os("CTRLDIFF_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&now).unwrap()).unwrap();
        return;
    }
    let golden: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for key in ["mid_mean", "mid_variance", "output_mean"] {
        let (g, n) = (golden[key].as_f64().unwrap(), now[key].as_f64().unwrap());
        assert!(
            (g - n).abs() <= 1e-5 * (1.0 + g.abs()),
            "{key}: recorded {g}, now {n}"
        );
    }
}
