use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use url::Url;

use ingest_harness::{synth_track, SynthSpec, TrackKind};

/// Synthesize CMAF tracks and push them to an ingest server.
#[derive(Parser)]
#[command(name = "ingest-harness", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic CMAF track to a file and print its expectations.
    Synth {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Push a synthetic track with one long-running chunked PUT (interface-1).
    Push1 {
        #[command(flatten)]
        spec: SpecArgs,
        /// Full ingest URL, e.g. http://host/cmaf/x.str/Switching(video)/Stream(v.cmfv)
        #[arg(long)]
        url: Url,
        /// Pacing in bytes per second.
        #[arg(long)]
        rate: Option<u64>,
        /// Number of parallel tracks; track i gets the suffix "-i" on its Stream() name.
        #[arg(long, default_value_t = 1)]
        tracks: u32,
    },
    /// Upload files, one PUT per file (interface-2).
    Push2 {
        /// Base URL of the ingest application.
        #[arg(long)]
        url: Url,
        /// Files as <remote-path>=<local-file>.
        #[arg(long = "file", required = true)]
        files: Vec<String>,
    },
    /// Delete a previously uploaded file (interface-2).
    Delete {
        #[arg(long)]
        url: Url,
        #[arg(long)]
        path: String,
    },
}

#[derive(Args)]
struct SpecArgs {
    #[arg(long, value_enum, default_value = "video")]
    kind: KindArg,
    #[arg(long, default_value_t = 1)]
    track_id: u32,
    #[arg(long, default_value_t = 15360)]
    timescale: u32,
    #[arg(long, default_value_t = 10)]
    chunks: u32,
    #[arg(long, default_value_t = 2)]
    chunks_per_fragment: u32,
    #[arg(long, default_value_t = 15)]
    samples_per_chunk: u32,
    #[arg(long, default_value_t = 512)]
    sample_duration: u32,
    #[arg(long, default_value_t = 1024)]
    payload_bytes: u32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum KindArg {
    Video,
    Audio,
}

impl SpecArgs {
    fn to_spec(&self) -> Result<SynthSpec> {
        let spec = SynthSpec {
            track_kind: match self.kind {
                KindArg::Video => TrackKind::Video,
                KindArg::Audio => TrackKind::Audio,
            },
            track_id: self.track_id,
            timescale: self.timescale,
            chunk_count: self.chunks,
            chunks_per_fragment: self.chunks_per_fragment,
            samples_per_chunk: self.samples_per_chunk,
            sample_duration: self.sample_duration,
            payload_bytes_per_sample: self.payload_bytes,
            seed: self.seed,
        };
        if let Err(e) = spec.validate() {
            bail!(e);
        }
        Ok(spec)
    }
}

fn track_url(url: &Url, index: u32, total: u32) -> Result<Url> {
    if total <= 1 {
        return Ok(url.clone());
    }
    let path = url.path();
    let start = path.find("Stream(").context("URL has no Stream() segment")? + "Stream(".len();
    let end = start + path[start..].find(')').context("unterminated Stream()")?;
    let mut out = url.clone();
    out.set_path(&format!("{}-{}{}", &path[..end], index, &path[end..]));
    Ok(out)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { spec, out } => {
            let spec = spec.to_spec()?;
            let track = synth_track(&spec);
            std::fs::write(&out, track.bytes()).with_context(|| format!("writing {}", out.display()))?;
            let report = serde_json::json!({
                "spec": spec,
                "bytes": track.header.len() + track.chunks.iter().map(Vec::len).sum::<usize>(),
                "fragment_boundaries": track.fragment_boundaries(),
                "chunks": track.expected,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(true)
        }
        Command::Push1 {
            spec,
            url,
            rate,
            tracks,
        } => {
            let spec = spec.to_spec()?;
            let track = synth_track(&spec);
            let handles: Vec<_> = (0..tracks.max(1))
                .map(|i| {
                    let url = track_url(&url, i, tracks)?;
                    let track = track.clone();
                    Ok(std::thread::spawn(move || {
                        ingest_harness::push_interface1(&url, &track, rate)
                    }))
                })
                .collect::<Result<_>>()?;
            let reports: Vec<_> = handles
                .into_iter()
                .map(|h| h.join().expect("push thread panicked"))
                .collect();
            let ok = reports.iter().all(|r| r.ok());
            println!("{}", serde_json::to_string_pretty(&reports)?);
            Ok(ok)
        }
        Command::Push2 { url, files } => {
            let mut loaded = Vec::with_capacity(files.len());
            for f in files {
                let (remote, local) = f
                    .split_once('=')
                    .with_context(|| format!("expected <remote>=<local>, got {f:?}"))?;
                let data = std::fs::read(local).with_context(|| format!("reading {local}"))?;
                loaded.push((remote.to_string(), data));
            }
            let reports = ingest_harness::push_interface2(&url, &loaded);
            let ok = reports.iter().all(|r| r.ok());
            println!("{}", serde_json::to_string_pretty(&reports)?);
            Ok(ok)
        }
        Command::Delete { url, path } => {
            let report = ingest_harness::delete_interface2(&url, &path);
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(report.ok())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
