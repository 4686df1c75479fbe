#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub struct Run {
    pub code: i32,
    pub stderr: String,
}

pub fn nhi(args: &[&str]) -> Run {
    let out: Output = Command::new(env!("CARGO_BIN_EXE_nhi"))
        .args(args)
        .output()
        .expect("spawn nhi");
    Run {
        code: out.status.code().expect("exit code"),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn ok(args: &[&str]) {
    let r = nhi(args);
    assert_eq!(r.code, 0, "nhi {args:?} failed: {}", r.stderr);
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `(file name, sha256)` of every output listed in a directory's run manifest.
pub fn checksums(dir: &Path) -> Vec<(String, String)> {
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
    run["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| {
            let name = Path::new(a["path"].as_str().unwrap())
                .file_name()
                .unwrap()
                .to_string_lossy()
                .into_owned();
            (name, a["sha256"].as_str().unwrap().to_string())
        })
        .collect()
}

pub fn files_with_suffix(dir: &Path, suffix: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(suffix))
        .collect();
    v.sort();
    v
}

/// Small, fast training setup over a small synthetic cohort.
pub fn write_config(dir: &Path, cases_per_grade: [usize; 5]) -> PathBuf {
    let path = dir.join("config.toml");
    let c = cases_per_grade;
    std::fs::write(
        &path,
        format!(
            "[train]\nlearning_rate = 0.001\nmax_epochs = 3\npatience = 2\nattention_dim = 8\n\
             [synthetic]\ncases_per_grade = [{}, {}, {}, {}, {}]\ntiles_per_slide = [5, 10]\ndim = 16\n\
             centers = [\"A\", \"B\"]\n",
            c[0], c[1], c[2], c[3], c[4]
        ),
    )
    .unwrap();
    path
}
