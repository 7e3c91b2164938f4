//! External adapter execution: substitute the directory placeholders,
//! run the command under a timeout, and verify the declared outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::illumination::stats_of_image;
use crate::manifest::{ImageRecord, LumaMode, Manifest};

/// What a stage is expected to leave in its output directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    /// One output image per input image, same file name.
    Images,
    /// Detection files: `.json` results or `.txt` label files.
    Detections,
}

/// Resolved description of one external stage.
#[derive(Debug, Clone)]
pub struct AdapterSpec {
    /// Stage tag recorded into provenance and error messages.
    pub stage: String,
    /// Command template with `{input_dir}` and `{output_dir}` placeholders.
    pub command: String,
    pub output_kind: OutputKind,
    pub timeout: Duration,
    /// Maximum concurrent invocations for image stages (the input set is
    /// split into this many directory chunks).
    pub parallelism: usize,
}

impl AdapterSpec {
    pub fn new(
        stage: impl Into<String>,
        command: impl Into<String>,
        output_kind: OutputKind,
        timeout: Duration,
        parallelism: usize,
    ) -> Result<Self> {
        let stage = stage.into();
        let command = command.into();
        for placeholder in ["{input_dir}", "{output_dir}"] {
            if !command.contains(placeholder) {
                return Err(Error::InvalidArgument(format!(
                    "adapter '{stage}': command template must contain {placeholder}"
                )));
            }
        }
        if timeout.is_zero() {
            return Err(Error::InvalidArgument(format!(
                "adapter '{stage}': timeout must be positive"
            )));
        }
        if parallelism == 0 {
            return Err(Error::InvalidArgument(format!(
                "adapter '{stage}': parallelism must be positive"
            )));
        }
        Ok(AdapterSpec {
            stage,
            command,
            output_kind,
            timeout,
            parallelism,
        })
    }
}

/// Single-quote a path for `sh -c`.
fn shell_quote(path: &Path) -> String {
    let s = path.to_string_lossy();
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn tail_of(path: &Path) -> String {
    match fs::read_to_string(path) {
        Ok(text) => {
            let tail: String = text.chars().rev().take(2000).collect::<String>().chars().rev().collect();
            tail.trim().to_string()
        }
        Err(_) => String::new(),
    }
}

/// Run one substituted command under the stage timeout, capturing output
/// to `log_path`. Nonzero exit and timeouts are stage failures carrying
/// the captured diagnostics.
fn execute(
    stage: &str,
    command_line: &str,
    timeout: Duration,
    log_path: &Path,
) -> Result<i32> {
    let log = fs::File::create(log_path).map_err(|e| Error::io(log_path, e))?;
    let log_err = log.try_clone().map_err(|e| Error::io(log_path, e))?;
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command_line)
        .stdin(Stdio::null())
        .stdout(Stdio::from(log))
        .stderr(Stdio::from(log_err))
        .spawn()
        .map_err(|e| Error::stage(stage, format!("failed to spawn '{command_line}': {e}")))?;

    let start = Instant::now();
    loop {
        match child.try_wait() {
            Ok(Some(status)) => {
                return if status.success() {
                    Ok(status.code().unwrap_or(0))
                } else {
                    Err(Error::stage(
                        stage,
                        format!(
                            "command exited with {status}; output tail:\n{}",
                            tail_of(log_path)
                        ),
                    ))
                };
            }
            Ok(None) => {
                if start.elapsed() >= timeout {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(Error::stage(
                        stage,
                        format!("timed out after {}s and was killed", timeout.as_secs()),
                    ));
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(e) => {
                return Err(Error::stage(stage, format!("wait failed: {e}")));
            }
        }
    }
}

fn substitute(template: &str, input_dir: &Path, output_dir: &Path) -> String {
    template
        .replace("{input_dir}", &shell_quote(input_dir))
        .replace("{output_dir}", &shell_quote(output_dir))
}

fn link_into(dir: &Path, source: &Path) -> Result<PathBuf> {
    let name = source
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{}: not a file path", source.display())))?;
    let dest = dir.join(name);
    if dest.exists() {
        fs::remove_file(&dest).map_err(|e| Error::io(&dest, e))?;
    }
    let absolute = source
        .canonicalize()
        .map_err(|e| Error::io(source, e))?;
    #[cfg(unix)]
    std::os::unix::fs::symlink(&absolute, &dest).map_err(|e| Error::io(&dest, e))?;
    #[cfg(not(unix))]
    fs::copy(&absolute, &dest).map_err(|e| Error::io(&dest, e))?;
    Ok(dest)
}

/// Materialize a directory containing exactly the manifest's files
/// (symlinks), returning the manifest rebased onto it.
pub fn materialize_input_dir(manifest: &Manifest, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rebased = manifest.clone();
    for record in &mut rebased.records {
        record.path = link_into(dir, &record.path)?;
    }
    Ok(rebased)
}

/// Run an image-to-image adapter over the input manifest.
///
/// The input set may be split into up to `parallelism` chunks executed
/// concurrently. Outputs are verified one-per-input by file name, decoded
/// for dimensions and fresh illumination stats, and returned as the stage
/// output manifest with extended provenance.
pub fn run_image_adapter(
    spec: &AdapterSpec,
    input: &Manifest,
    input_dir: &Path,
    output_dir: &Path,
    luma: LumaMode,
    log_dir: &Path,
) -> Result<Manifest> {
    debug_assert_eq!(spec.output_kind, OutputKind::Images);
    if input.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "adapter '{}': input manifest is empty",
            spec.stage
        )));
    }
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    fs::create_dir_all(log_dir).map_err(|e| Error::io(log_dir, e))?;

    let chunks = spec.parallelism.min(input.len()).max(1);
    if chunks == 1 {
        let log_path = log_dir.join(format!("{}.log", spec.stage));
        let command = substitute(&spec.command, input_dir, output_dir);
        execute(&spec.stage, &command, spec.timeout, &log_path)?;
    } else {
        run_chunked(spec, input, output_dir, log_dir)?;
    }

    verify_and_collect(spec, input, output_dir, luma)
}

/// Split the input into chunk directories and run one invocation per
/// chunk concurrently, collecting every chunk's outputs into `output_dir`.
fn run_chunked(
    spec: &AdapterSpec,
    input: &Manifest,
    output_dir: &Path,
    log_dir: &Path,
) -> Result<()> {
    let chunks = spec.parallelism.min(input.len());
    let scratch = output_dir.join(".chunks");
    if scratch.exists() {
        fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    }

    let per_chunk = input.len().div_ceil(chunks);
    let jobs: Vec<(usize, &[ImageRecord])> =
        input.records.chunks(per_chunk).enumerate().collect();

    let results: Vec<Result<Vec<PathBuf>>> = jobs
        .par_iter()
        .map(|(index, records)| {
            let chunk_in = scratch.join(format!("in_{index}"));
            let chunk_out = scratch.join(format!("out_{index}"));
            fs::create_dir_all(&chunk_in).map_err(|e| Error::io(&chunk_in, e))?;
            fs::create_dir_all(&chunk_out).map_err(|e| Error::io(&chunk_out, e))?;
            for record in *records {
                link_into(&chunk_in, &record.path)?;
            }
            let log_path = log_dir.join(format!("{}.chunk{index}.log", spec.stage));
            let command = substitute(&spec.command, &chunk_in, &chunk_out);
            execute(&spec.stage, &command, spec.timeout, &log_path)?;
            let mut produced = Vec::new();
            for entry in fs::read_dir(&chunk_out).map_err(|e| Error::io(&chunk_out, e))? {
                produced.push(entry.map_err(|e| Error::io(&chunk_out, e))?.path());
            }
            Ok(produced)
        })
        .collect();

    for result in results {
        for produced in result? {
            let name = produced.file_name().unwrap_or_default().to_owned();
            let dest = output_dir.join(name);
            fs::rename(&produced, &dest).map_err(|e| Error::io(&dest, e))?;
        }
    }
    fs::remove_dir_all(&scratch).map_err(|e| Error::io(&scratch, e))?;
    Ok(())
}

fn verify_and_collect(
    spec: &AdapterSpec,
    input: &Manifest,
    output_dir: &Path,
    luma: LumaMode,
) -> Result<Manifest> {
    let mut missing = Vec::new();
    let mut expected = Vec::new();
    for record in &input.records {
        let name = record.path.file_name().unwrap_or_default().to_owned();
        let out_path = output_dir.join(&name);
        if out_path.is_file() {
            expected.push((record, out_path));
        } else {
            missing.push(out_path);
        }
    }
    if !missing.is_empty() {
        let listed: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::stage(
            &spec.stage,
            format!("missing outputs: {}", listed.join(", ")),
        ));
    }

    let records: Vec<Result<ImageRecord>> = expected
        .par_iter()
        .map(|(record, out_path)| {
            let img = image::open(out_path)
                .map_err(|e| {
                    Error::stage(
                        &spec.stage,
                        format!("output {} is not a decodable image: {e}", out_path.display()),
                    )
                })?
                .to_rgb8();
            let dims = crate::geometry::ImageDims::new(img.width(), img.height())?;
            let stats = stats_of_image(&img, luma)?;
            let mut provenance = record.provenance.clone();
            provenance.push(spec.stage.clone());
            Ok(ImageRecord {
                image_id: record.image_id.clone(),
                path: out_path.clone(),
                dims,
                stats: Some(stats),
                cluster: record.cluster,
                scenario: record.scenario,
                provenance,
            })
        })
        .collect();

    let mut manifest = Manifest {
        header: input.header.clone(),
        records: Vec::with_capacity(expected.len()),
    };
    for record in records {
        manifest.records.push(record?);
    }
    Ok(manifest)
}

/// Run a detector adapter once over the input directory and return the
/// detection files it produced (`.json` results, `.txt` labels), sorted.
///
/// A results-style detector must leave at least one `.json` file — an
/// empty detection set is an empty array, never a missing file. Label
/// directories may legitimately be empty.
pub fn run_detect_adapter(
    spec: &AdapterSpec,
    input: &Manifest,
    input_dir: &Path,
    output_dir: &Path,
    log_dir: &Path,
) -> Result<Vec<PathBuf>> {
    debug_assert_eq!(spec.output_kind, OutputKind::Detections);
    if input.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "adapter '{}': input manifest is empty",
            spec.stage
        )));
    }
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    fs::create_dir_all(log_dir).map_err(|e| Error::io(log_dir, e))?;

    let log_path = log_dir.join(format!("{}.log", spec.stage));
    let command = substitute(&spec.command, input_dir, output_dir);
    execute(&spec.stage, &command, spec.timeout, &log_path)?;

    let mut files: Vec<PathBuf> = fs::read_dir(output_dir)
        .map_err(|e| Error::io(output_dir, e))?
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(output_dir, e))?
        .into_iter()
        .map(|entry| entry.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("json") | Some("txt")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}
