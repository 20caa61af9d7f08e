#![allow(dead_code)]

use std::ffi::OsStr;
use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

use serde_json::Value;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_depscreen"));
    c.env("RUST_LOG", "warn");
    c
}

pub fn depscreen<S: AsRef<OsStr>>(args: &[S]) -> Output {
    bin().args(args).output().expect("spawn depscreen")
}

/// A `depscreen serve` child process, killed on drop.
pub struct Server {
    child: Child,
    pub base: String,
    client: reqwest::blocking::Client,
}

impl Server {
    pub fn start<S: AsRef<OsStr>>(args: &[S]) -> Self {
        let mut child = bin()
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .expect("spawn depscreen serve");
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .unwrap();
        let v: Value = serde_json::from_str(&line).unwrap_or_else(|_| panic!("serve printed {line:?}"));
        let base = format!("http://{}", v["listening"].as_str().unwrap());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .unwrap();
        Server { child, base, client }
    }

    pub fn call(&self, method: &str, path: &str, token: &str, body: Option<Value>) -> (u16, Value) {
        let url = format!("{}{path}", self.base);
        let mut req = match method {
            "GET" => self.client.get(url),
            "POST" => self.client.post(url),
            "PUT" => self.client.put(url),
            "DELETE" => self.client.delete(url),
            other => panic!("method {other}"),
        }
        .bearer_auth(token);
        if let Some(b) = body {
            req = req.json(&b);
        }
        let resp = req.send().unwrap();
        let status = resp.status().as_u16();
        let text = resp.text().unwrap();
        (status, serde_json::from_str(&text).unwrap_or(Value::String(text)))
    }

    pub fn wait_processed(&self, id: &str, token: &str) -> Value {
        for _ in 0..6000 {
            let (status, v) = self.call("GET", &format!("/sessions/{id}"), token, None);
            match status {
                202 => std::thread::sleep(Duration::from_millis(10)),
                200 => return v,
                other => panic!("GET /sessions/{id}: {other} {v}"),
            }
        }
        panic!("session {id} never processed");
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}
