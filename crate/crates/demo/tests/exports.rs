use serde_json::Value;
use tsg_demo::{geometry_json, importance_json, meteor_json};

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn importance_ranks_the_attended_pair_first() {
    // three objects, two words: object 2 then object 0 get the attention
    let alpha = [0.1, 0.7, 0.1, 0.2, 0.8, 0.1];
    let v = parse(&importance_json(&alpha, 3, 2, "max").unwrap());
    let gamma: Vec<f64> = v["gamma"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert_eq!(gamma, vec![0.7, 0.2, 0.8]);
    let pairs = v["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 6);
    let top: (u64, u64) = (
        pairs[0]["subject"].as_u64().unwrap(),
        pairs[0]["object"].as_u64().unwrap(),
    );
    assert!(top == (0, 2) || top == (2, 0));
    let z: f64 = [0.9f64, 1.5, 0.9, 1.0, 1.5, 1.0]
        .iter()
        .map(|d| d.exp())
        .sum();
    assert!((pairs[0]["beta"].as_f64().unwrap() - 1.5f64.exp() / z).abs() < 1e-12);
    let total: f64 = pairs.iter().map(|p| p["beta"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn mean_pooling_averages_rows() {
    let alpha = [0.2, 0.6, 0.8, 0.4];
    let v = parse(&importance_json(&alpha, 2, 2, "mean").unwrap());
    let gamma: Vec<f64> = v["gamma"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert!((gamma[0] - 0.4).abs() < 1e-12 && (gamma[1] - 0.6).abs() < 1e-12);
}

#[test]
fn importance_rejects_bad_input() {
    assert!(importance_json(&[1.0, 0.0], 2, 2, "max").is_err());
    assert!(importance_json(&[1.0], 1, 1, "max").is_err());
    assert!(importance_json(&[0.5; 4], 2, 2, "median").is_err());
}

#[test]
fn geometry_of_shifted_boxes() {
    let v = parse(&geometry_json([0.0, 0.0, 10.0, 10.0], [5.0, 0.0, 15.0, 10.0]).unwrap());
    assert!((v["iou"].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-12);
    let f: Vec<f64> = v["feature"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert_eq!(f[..5], [0.5, 0.0, 1.0, 1.0, 1.0]);
    assert!(geometry_json([0.0, 0.0, -1.0, 10.0], [0.0, 0.0, 1.0, 1.0]).is_err());
}

#[test]
fn meteor_reports_cleared_thresholds() {
    let v = parse(&meteor_json("dog", "Dog near car"));
    assert!((v["score"].as_f64().unwrap() - 5.0 / 28.0).abs() < 1e-12);
    assert_eq!(v["passes"], serde_json::json!([0.0, 0.05, 0.1, 0.15]));
    assert_eq!(parse(&meteor_json("", "a man"))["score"], 0.0);
}
