//! Cross-process model serialization: a model saved by one process and
//! loaded by another produces the same logits on a fixed batch. The test
//! re-executes its own binary in a child mode to get a genuinely separate
//! process.

use std::io::Write;
use std::process::Command;

use pixsim::nn::serialize::{load_model_file, save_model_file};
use pixsim::nn::build_net;
use pixsim::tensor::Tensor;

const CHILD_ENV: &str = "PIXSIM_MODEL_IO_CHILD";

fn fixed_batch() -> Tensor {
    Tensor::from_fn(vec![4, 1, 8, 8], |i| ((i * 31 + 7) % 97) as f32 / 97.0)
}

fn logits_bytes(net: &pixsim::TapNet) -> Vec<u8> {
    let (logits, _) = net.forward(&fixed_batch()).unwrap();
    logits.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn child_main(model_path: &str, out_path: &str) {
    let (net, _) = load_model_file(std::path::Path::new(model_path)).unwrap();
    let mut f = std::fs::File::create(out_path).unwrap();
    f.write_all(&logits_bytes(&net)).unwrap();
}

#[test]
fn model_loaded_in_another_process_gives_identical_logits() {
    if let Ok(args) = std::env::var(CHILD_ENV) {
        let (model, out) = args.split_once(';').unwrap();
        child_main(model, out);
        return;
    }

    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("model.tnet");
    let out_path = dir.path().join("logits.bin");

    let net = build_net("tiny", [1, 8, 8], 10, 99).unwrap();
    save_model_file(&net, &[], &model_path).unwrap();
    let parent_logits = logits_bytes(&net);

    let exe = std::env::current_exe().unwrap();
    let status = Command::new(exe)
        .arg("model_loaded_in_another_process_gives_identical_logits")
        .arg("--exact")
        .env(
            CHILD_ENV,
            format!("{};{}", model_path.display(), out_path.display()),
        )
        .status()
        .unwrap();
    assert!(status.success(), "child process failed");

    let child_logits = std::fs::read(&out_path).unwrap();
    assert_eq!(parent_logits, child_logits, "cross-process logits differ");
}
