//! Stand-in child processes for exercising the subprocess protocols.

use std::io::{self, BufRead, Read, Write};
use std::time::Duration;

use evidence_core::orchestrator::{CandidateProvider, PerturbationRequest, QuestionContext, SyntheticProvider};
use evidence_core::referee::{Critique, GapEntry, GapSubject};
use evidence_core::{Error, Result};
use serde::Deserialize;
use serde_json::json;

use crate::args::{MockProviderArgs, MockRefereeArgs};
use crate::commands;

#[derive(Deserialize)]
struct WireRequest {
    question: QuestionContext,
    request: PerturbationRequest,
}

pub fn provider(seed: u64, args: &MockProviderArgs) -> Result<()> {
    let mut synthetic = SyntheticProvider::new(commands::synthetic_profile_for(args.profile), seed);
    let stdout = io::stdout();
    for line in io::stdin().lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: WireRequest = serde_json::from_str(&line).map_err(|e| Error::Data(e.to_string()))?;
        let reply = if args.fail {
            json!({"error": "mock provider configured to fail"})
        } else if args.exhaust_after.is_some_and(|n| req.request.index >= n) {
            json!({"exhausted": true})
        } else {
            let raw = synthetic
                .generate(&req.question, &req.request)
                .map_err(|e| Error::Data(e.to_string()))?;
            serde_json::to_value(raw)?
        };
        let mut out = stdout.lock();
        serde_json::to_writer(&mut out, &reply)?;
        out.write_all(b"\n")?;
        out.flush()?;
    }
    Ok(())
}

pub fn referee(args: &MockRefereeArgs) -> Result<()> {
    let mut request = String::new();
    io::stdin().read_to_string(&mut request)?;
    if args.sleep > 0.0 {
        std::thread::sleep(Duration::from_secs_f64(args.sleep));
    }
    let mut out = io::stdout().lock();
    if args.garbage {
        writeln!(out, "the winner looks fine to me")?;
        return Ok(());
    }
    let critique = Critique {
        gaps: (0..args.gaps)
            .map(|i| GapEntry {
                subject: GapSubject::Claim(format!("claim {i}")),
                reason: "not visible in the cited frames".into(),
            })
            .collect(),
        aha_detected: false,
    };
    serde_json::to_writer(&mut out, &critique)?;
    out.write_all(b"\n")?;
    Ok(())
}
