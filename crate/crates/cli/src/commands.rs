use std::path::{Path, PathBuf};

use dvae_core::convert::{convert, extract_speaker_embedding, synthesize, write_embeddings_csv};
use dvae_core::data::{precompute_features, scan_corpus, CorpusManifest, Dataset, OnError, SplitSpec, MANIFEST_FILE};
use dvae_core::dsp::{load_wav, read_features, read_stats, wav_to_logmel, write_features, write_wav, MelFilterbank, MelSpectrogram, NormalizationStats, SpectrogramConfig};
use dvae_core::eval::{evaluate_corpus, read_pairs_csv};
use dvae_core::model::{Model, ModelConfig};
use dvae_core::train::{resume, train_loop, Precision, TrainConfig};
use dvae_nn::Scalar;

use crate::config::CliConfig;
use crate::{Cli, CliError, Command, ConvertArgs, EmbedArgs, EvalArgs, FeaturesArgs, PrecisionArg, TrainArgs};

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Features(a) => features(a),
        Command::Train(a) => train(a, cli.seed),
        Command::Convert(a) => convert_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Embed(a) => embed(a),
    }
}

fn require_file(flag: &str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{flag} {}: no such file", path.display())))
    }
}

fn require_dir(flag: &str, path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{flag} {}: no such directory", path.display())))
    }
}

fn load_config(path: Option<&Path>) -> Result<CliConfig, CliError> {
    let cfg = CliConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(flag: &str, path: &Path) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(path)
        .and_then(|_| std::fs::canonicalize(path))
        .map_err(|e| CliError::Runtime(format!("{flag} {}: {e}", path.display())))
}

fn filterbank(dsp: &SpectrogramConfig) -> Result<MelFilterbank, CliError> {
    MelFilterbank::new(dsp).map_err(|e| CliError::Validation(format!("config dsp: {e}")))
}

fn features(a: FeaturesArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    require_dir("--corpus", &a.corpus)?;
    let split_path = a.split.or(cfg.paths.split.clone());
    let split = match &split_path {
        Some(p) => {
            require_file("--split", p)?;
            SplitSpec::read(p).map_err(|e| CliError::Validation(e.to_string()))?
        }
        None => SplitSpec::Default,
    };
    let root = std::fs::canonicalize(&a.corpus).map_err(|e| CliError::Runtime(format!("--corpus {}: {e}", a.corpus.display())))?;
    let manifest = scan_corpus(&root, "wav", &split).map_err(|e| CliError::Validation(format!("--corpus: {e}")))?;
    let fb = filterbank(&cfg.dsp)?;
    let out = create_dir("--out", &a.out)?;
    let on_error = if a.continue_on_error { OnError::Continue } else { OnError::Abort };
    let report = precompute_features(&manifest, &out, &cfg.dsp, &fb, on_error)?;
    for (path, e) in &report.failures {
        eprintln!("skipped {}: {e}", path.display());
    }
    let n: usize = report.manifest.speakers.iter().map(|s| s.utterances.len()).sum();
    println!(
        "{n} utterances from {} speakers; log-mel range [{:.4}, {:.4}]; manifest {}",
        report.manifest.speakers.len(),
        report.stats.min,
        report.stats.max,
        out.join(MANIFEST_FILE).display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs, mut cfg: TrainConfig, seed: Option<u64>) -> Result<TrainConfig, CliError> {
    if let Some(v) = a.steps {
        cfg.total_steps = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.beta {
        cfg.beta = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = a.log_every {
        cfg.log_every = v;
    }
    if let Some(p) = a.precision {
        cfg.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| CliError::Validation(format!("train settings: {e}")))?;
    Ok(cfg)
}

fn train(a: TrainArgs, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let tc = train_config(&a, cfg.train.clone(), seed)?;
    require_file("--manifest", &a.manifest)?;
    if let Some(r) = &a.resume {
        require_file("--resume", r)?;
    }
    let manifest = CorpusManifest::read(&a.manifest).map_err(|e| CliError::Validation(format!("--manifest: {e}")))?;
    let mut model_cfg = if a.toy { ModelConfig::toy() } else { cfg.model.clone() };
    model_cfg.beta = tc.beta;
    let dataset = Dataset::load(&manifest, model_cfg.segment_frames)?;
    let out = create_dir("--out", &a.out)?;
    let summary = match tc.precision {
        Precision::F32 => run_training::<f32>(&dataset, model_cfg, &tc, a.resume.as_deref(), &out)?,
        Precision::F64 => run_training::<f64>(&dataset, model_cfg, &tc, a.resume.as_deref(), &out)?,
    };
    match (summary.first, summary.last) {
        (Some(f), Some(l)) => println!(
            "trained to step {}: loss {:.5} -> {:.5}; final checkpoint {}",
            tc.total_steps,
            f.total,
            l.total,
            summary.final_checkpoint.display()
        ),
        _ => println!("no steps run; checkpoint {}", summary.final_checkpoint.display()),
    }
    Ok(())
}

fn run_training<F: Scalar>(
    dataset: &Dataset,
    model_cfg: ModelConfig,
    tc: &TrainConfig,
    resume_from: Option<&Path>,
    out: &Path,
) -> Result<dvae_core::train::TrainSummary, CliError> {
    let mut model = match resume_from {
        Some(p) => {
            let (m, step) = resume::<F>(p).map_err(|e| CliError::Validation(format!("--resume: {e}")))?;
            eprintln!("resuming from step {step}");
            m
        }
        None => Model::<F>::new(model_cfg, tc.seed).map_err(|e| CliError::Validation(format!("config model: {e}")))?,
    };
    Ok(train_loop(dataset, &mut model, tc, out)?)
}

fn stats_for(flag_value: Option<PathBuf>, cfg: &CliConfig) -> Result<NormalizationStats, CliError> {
    let Some(path) = flag_value.or(cfg.paths.stats.clone()) else {
        return Err(CliError::Validation("normalization stats required: pass --stats or set paths.stats".into()));
    };
    require_file("--stats", &path)?;
    read_stats(&path).map_err(|e| CliError::Validation(format!("--stats: {e}")))
}

fn load_model(ckpt: &Path) -> Result<Model<f32>, CliError> {
    require_file("--ckpt", ckpt)?;
    let (model, _) = Model::<f32>::load(ckpt).map_err(|e| CliError::Validation(format!("--ckpt: {e}")))?;
    Ok(model)
}

fn normalized_mel(path: &Path, cfg: &CliConfig, fb: &MelFilterbank, stats: &NormalizationStats) -> Result<MelSpectrogram, CliError> {
    let mel = load_wav(path)
        .and_then(|w| wav_to_logmel(&w, &cfg.dsp, fb))
        .and_then(|m| stats.normalize(&m))
        .map_err(|e| e.at(path))?;
    Ok(mel)
}

fn convert_cmd(a: ConvertArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let stats = stats_for(a.stats, &cfg)?;
    let mut model = load_model(&a.ckpt)?;
    if model.config().n_mels != cfg.dsp.n_mels {
        return Err(CliError::Validation(format!(
            "--ckpt: model uses {} mel bins, dsp config {}",
            model.config().n_mels,
            cfg.dsp.n_mels
        )));
    }
    require_file("--source", &a.source)?;
    for r in &a.target_ref {
        require_file("--target-ref", r)?;
    }
    let fb = filterbank(&cfg.dsp)?;
    let source = normalized_mel(&a.source, &cfg, &fb, &stats)?;
    let refs = a
        .target_ref
        .iter()
        .map(|p| normalized_mel(p, &cfg, &fb, &stats))
        .collect::<Result<Vec<_>, _>>()?;
    let embedding = extract_speaker_embedding(&mut model, &refs)?;
    let converted = convert(&mut model, &source, &embedding)?;
    let mel_out = a.out.with_extension("dvf");
    write_features(&mel_out, &converted)?;
    let wave = synthesize(&converted, &stats, &cfg.dsp, &fb)?;
    write_wav(&a.out, &wave)?;
    println!(
        "{} frames from {} reference segment(s); wrote {} and {}",
        converted.n_frames,
        embedding.n_chunks,
        a.out.display(),
        mel_out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    require_file("--pairs", &a.pairs)?;
    let pairs = read_pairs_csv(&a.pairs).map_err(|e| CliError::Validation(format!("--pairs: {e}")))?;
    if pairs.is_empty() {
        return Err(CliError::Validation(format!("--pairs {}: no pairs listed", a.pairs.display())));
    }
    let fb = filterbank(&cfg.dsp)?;
    let report = evaluate_corpus(&pairs, &cfg.dsp, &fb);
    report.write_csv(&a.out)?;
    println!(
        "MCD over {} pair(s): mean {:.4} dB, std {:.4} dB",
        report.rows.len() - report.failures(),
        report.mean,
        report.std
    );
    let failed: Vec<String> = report
        .rows
        .iter()
        .filter_map(|r| r.mcd_db.as_ref().err().map(|e| format!("{}: {e}", r.converted.display())))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("{} pair(s) failed: {}", failed.len(), failed.join("; "))))
    }
}

fn embed(a: EmbedArgs) -> Result<(), CliError> {
    let mut model = load_model(&a.ckpt)?;
    require_dir("--corpus", &a.corpus)?;
    let manifest_path = a.corpus.join(MANIFEST_FILE);
    require_file("--corpus", &manifest_path)?;
    let manifest = CorpusManifest::read(&manifest_path).map_err(|e| CliError::Validation(format!("--corpus: {e}")))?;
    let mut rows = Vec::new();
    for spk in &manifest.speakers {
        for path in &spk.utterances {
            let mel = read_features(path)?;
            if mel.n_frames < model.config().segment_frames {
                eprintln!("skipped {}: {} frames, shorter than one segment", path.display(), mel.n_frames);
                continue;
            }
            let mut e = extract_speaker_embedding(&mut model, &[mel]).map_err(|e| e.at(path))?;
            e.speaker_id = Some(spk.id.clone());
            rows.push((spk.id.clone(), dvae_core::data::utterance_id(path), e));
        }
    }
    if rows.is_empty() {
        return Err(CliError::Runtime("no utterance is long enough for an embedding".into()));
    }
    write_embeddings_csv(&a.out, &rows)?;
    println!("{} embeddings from {} speakers written to {}", rows.len(), manifest.speakers.len(), a.out.display());
    Ok(())
}
