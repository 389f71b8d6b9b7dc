//! Child-process bridge to an embedding extractor.
//!
//! The extractor is run as `<bin> embed --stdin-jsonl`; it reads
//! `prompts.jsonl` lines on stdin and writes one BFEM document to stdout.

use std::collections::BTreeSet;
use std::io::{self, Read, Write};
use std::path::Path;
use std::process::{Command, Stdio};
use std::thread;

use budgetfusion::formats::{decode_bfem, write_prompts, EmbeddingTable};
use budgetfusion::types::Prompt;
use budgetfusion::{Error, Result};

pub fn embed_prompts(bin: &Path, prompts: &[Prompt]) -> Result<EmbeddingTable> {
    let mut child = Command::new(bin)
        .args(["embed", "--stdin-jsonl"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| io::Error::new(e.kind(), format!("cannot start extractor {}: {e}", bin.display())))?;

    let mut payload = Vec::new();
    write_prompts(&mut payload, prompts)?;
    let mut stdin = child.stdin.take().expect("stdin is piped");
    // Feed stdin from a thread so a chatty extractor cannot deadlock on a full stdout pipe.
    let writer = thread::spawn(move || -> io::Result<()> {
        stdin.write_all(&payload)?;
        drop(stdin);
        Ok(())
    });
    let mut out = Vec::new();
    child.stdout.take().expect("stdout is piped").read_to_end(&mut out)?;
    let status = child.wait()?;
    let write_result = writer.join().map_err(|_| io::Error::other("extractor stdin writer panicked"))?;
    if !status.success() {
        return Err(io::Error::other(format!("extractor {} exited with {status}", bin.display())).into());
    }
    write_result?;

    let table = decode_bfem(&out)?;
    let want: BTreeSet<u64> = prompts.iter().map(|p| p.id).collect();
    let got: BTreeSet<u64> = table.records.iter().map(|(id, _)| *id).collect();
    if want != got {
        return Err(Error::Validation(format!(
            "extractor returned ids {:?}, expected {:?}",
            got.iter().take(5).collect::<Vec<_>>(),
            want.iter().take(5).collect::<Vec<_>>()
        )));
    }
    Ok(table)
}
