#![allow(dead_code)]

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

pub const TINY_CONFIG: &str = "\
n_students = 8
n_staff = 4
n_locations = 2
n_outcomes = 10
n_procedures = 3
items_per_procedure = 5
n_teaching_units = 2
n_questions = 16
procedures_per_location = 2
staff_per_location = 2
clinic_size = 4
years = 1
teaching_weeks_per_year = 4
mean_observations_per_session = 6.0
";

pub fn wba(data: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wba"))
        .arg("--data-dir")
        .arg(data)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn ok(data: &Path, args: &[&str]) -> Vec<u8> {
    let out = wba(data, args);
    assert!(out.status.success(), "wba {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out.stdout
}

/// Parses the single-line JSON error a failed command prints.
pub fn error_code(out: &Output) -> String {
    assert!(!out.status.success());
    let text = String::from_utf8_lossy(&out.stderr);
    assert_eq!(text.trim_end().lines().count(), 1, "error output is one line: {text}");
    let v: serde_json::Value = serde_json::from_str(text.trim()).expect("error is JSON");
    v["error"].as_str().unwrap().to_owned()
}

/// A generated tiny cohort on disk: `registry.toml`, `batches.jsonl`, `truth.json`.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub gen: PathBuf,
    pub data: PathBuf,
}

impl Fixture {
    pub fn new(seed: u64) -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let gen = dir.path().join("gen");
        let data = dir.path().join("data");
        let config = dir.path().join("cohort.toml");
        std::fs::write(&config, TINY_CONFIG).unwrap();
        ok(
            &data,
            &[
                "generate-cohort",
                "--seed",
                &seed.to_string(),
                "--out-dir",
                gen.to_str().unwrap(),
                "--config",
                config.to_str().unwrap(),
            ],
        );
        Fixture { dir, gen, data }
    }

    pub fn path(&self, name: &str) -> String {
        self.gen.join(name).to_str().unwrap().to_owned()
    }

    pub fn loaded(seed: u64) -> Fixture {
        let f = Fixture::new(seed);
        ok(&f.data, &["load-registry", &f.path("registry.toml")]);
        ok(&f.data, &["import-batch", &f.path("batches.jsonl")]);
        f
    }

    pub fn batches(&self) -> Vec<String> {
        std::fs::read_to_string(self.gen.join("batches.jsonl"))
            .unwrap()
            .lines()
            .map(str::to_owned)
            .collect()
    }
}

pub struct Server {
    pub child: Child,
    pub base: String,
}

impl Server {
    pub fn start(data: &Path) -> Server {
        Server::try_start(data, "127.0.0.1:0").unwrap_or_else(|e| panic!("server failed to start: {e}"))
    }

    pub fn try_start(data: &Path, bind: &str) -> Result<Server, String> {
        let mut child = Command::new(env!("CARGO_BIN_EXE_wba"))
            .arg("--data-dir")
            .arg(data)
            .args(["serve", "--bind", bind])
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        match line.trim().strip_prefix("listening on ") {
            Some(base) => Ok(Server {
                base: base.to_owned(),
                child,
            }),
            None => {
                let out = child.wait_with_output().unwrap();
                Err(String::from_utf8_lossy(&out.stderr).into_owned())
            }
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn get(&self, path: &str) -> reqwest::blocking::Response {
        reqwest::blocking::get(self.url(path)).unwrap()
    }

    pub fn post(&self, path: &str, content_type: &str, body: impl Into<String>) -> reqwest::blocking::Response {
        reqwest::blocking::Client::new()
            .post(self.url(path))
            .header("content-type", content_type)
            .body(body.into())
            .send()
            .unwrap()
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
