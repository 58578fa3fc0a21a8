use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use deskformer_core::chatml::{self, Conversation, Role};
use deskformer_core::eval::{self, SamplingPolicy};
use deskformer_core::extension::{parse_ntk, parse_windows};
use deskformer_core::model::checkpoint::{decode_tensors, load_config};
use deskformer_core::model::{load_checkpoint, save_checkpoint};
use deskformer_core::tokenizer::{train_vocabulary, ENDOFTEXT, IM_END, IM_START};
use deskformer_core::training::{
    pretraining_batches, run_training, shuffled_batches, AdamW, Batch, Example, StepMetrics,
};
use deskformer_core::{ExtensionConfig, Float, Model, Precision, TokenId, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{self, EngineConfig};
use crate::{Command, ExtensionArgs, UsageError};

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            steps,
            corpus,
            sft,
            vocab,
            init,
            out,
            metrics,
            checkpoint_every,
        } => {
            let mut cfg = config::load(config.config.as_deref(), &config.overrides)?;
            if let Some(s) = steps {
                cfg.train.total_steps = s;
                cfg.train.warmup_steps = cfg.train.warmup_steps.min(s);
            }
            cfg.paths.corpus = corpus.or(cfg.paths.corpus);
            cfg.paths.vocab = vocab.or(cfg.paths.vocab);
            cfg.paths.checkpoint = out.or(cfg.paths.checkpoint);
            train(cfg, sft, init, metrics, checkpoint_every)
        }
        Command::EvalPpl {
            model,
            corpus,
            vocab,
            lengths,
            techniques,
            max_sequences,
            out,
            plot,
        } => eval_ppl(&model, &corpus, &vocab, &lengths, &techniques, max_sequences, out, plot),
        Command::Tokenize {
            vocab,
            text,
            allow_specials,
        } => {
            let v = load_vocab(&vocab)?;
            let ids = v.encode(&text, allow_specials).ids;
            let line: Vec<String> = ids.iter().map(u32::to_string).collect();
            writeln!(io::stdout(), "{}", line.join(" "))?;
            Ok(())
        }
        Command::TrainVocab { corpus, size, out } => {
            let docs = read_documents(&corpus)?;
            let specials = EngineConfig::default().tokenizer.specials;
            let specials: Vec<&str> = specials.iter().map(String::as_str).collect();
            let v = train_vocabulary(docs.iter().map(|d| d.as_bytes()), size, &specials)?;
            ensure_parent(&out)?;
            v.save_file(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {} ordinary tokens to {}", v.base_vocab_size(), out.display());
            Ok(())
        }
        Command::BenchCompression {
            vocab,
            baseline,
            corpora,
        } => bench_compression(&vocab, &baseline, &corpora),
        Command::Generate {
            config,
            model,
            vocab,
            prompt,
            max_new,
            top_p,
            seed,
            ext,
        } => {
            let cfg = config::load(config.config.as_deref(), &config.overrides)?;
            let ext = extension_from(&cfg.extension, &ext)?;
            let policy = policy(top_p, seed.unwrap_or(cfg.seed));
            let v = load_vocab(&vocab)?;
            let ids = v.encode(&prompt, true).ids;
            let stop: Vec<TokenId> = [ENDOFTEXT, IM_END].iter().filter_map(|s| v.special_id(s)).collect();
            let m = load_model(&model)?;
            let out = generate_tokens(&m, &ext, &ids, policy, max_new, &stop)?;
            writeln!(io::stdout(), "{}{}", prompt, v.decode_lossy(&out)?)?;
            Ok(())
        }
        Command::Chat {
            config,
            model,
            vocab,
            system,
            max_new,
            top_p,
            seed,
            ext,
        } => {
            let cfg = config::load(config.config.as_deref(), &config.overrides)?;
            let ext = extension_from(&cfg.extension, &ext)?;
            let policy = policy(top_p, seed.unwrap_or(cfg.seed));
            chat(&model, &vocab, system, max_new, policy, &ext)
        }
        Command::InspectCheckpoint { model } => inspect(&model),
    }
}

fn policy(top_p: Option<f64>, seed: u64) -> SamplingPolicy {
    match top_p {
        Some(p) => SamplingPolicy::TopP { p, seed },
        None => SamplingPolicy::Greedy,
    }
}

/// Creates the directory an output file will be written into.
fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))
        }
        _ => Ok(()),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    require_file(path, "vocabulary")?;
    let specials = EngineConfig::default().tokenizer.specials;
    let specials: Vec<&str> = specials.iter().map(String::as_str).collect();
    Vocabulary::load_file(path, &specials).with_context(|| format!("loading vocabulary {}", path.display()))
}

/// Splits a text file into documents at `<|endoftext|>` markers.
fn read_documents(path: &Path) -> Result<Vec<String>> {
    require_file(path, "corpus")?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading corpus {}", path.display()))?;
    Ok(text
        .split(ENDOFTEXT)
        .map(|d| d.strip_prefix('\n').unwrap_or(d))
        .map(|d| d.strip_suffix('\n').unwrap_or(d))
        .filter(|d| !d.is_empty())
        .map(str::to_string)
        .collect())
}

fn extension_from(base: &ExtensionConfig, args: &ExtensionArgs) -> Result<ExtensionConfig> {
    let mut ext = base.clone();
    if let Some(n) = &args.ntk {
        ext.ntk = parse_ntk(n).map_err(|e| UsageError(e.to_string()))?;
    }
    if args.logn {
        ext.logn = true;
    }
    if let Some(w) = &args.windows {
        ext.windows = Some(parse_windows(w).map_err(|e| UsageError(e.to_string()))?);
    }
    Ok(ext)
}

/// A loaded checkpoint at whichever precision it declares.
enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

/// Evaluates `$body` with `$m` bound to the concrete model.
macro_rules! on_model {
    ($any:expr, $m:ident => $body:expr) => {
        match $any {
            AnyModel::F32($m) => $body,
            AnyModel::F64($m) => $body,
        }
    };
}

fn load_model(path: &Path) -> Result<AnyModel> {
    require_file(path, "checkpoint")?;
    let cfg = load_config(path)?;
    Ok(match cfg.precision {
        Precision::Fp32 => AnyModel::F32(load_checkpoint(path)?),
        Precision::Fp64 => AnyModel::F64(load_checkpoint(path)?),
    })
}

fn generate_tokens(
    m: &AnyModel,
    ext: &ExtensionConfig,
    ids: &[TokenId],
    policy: SamplingPolicy,
    max_new: usize,
    stop: &[TokenId],
) -> Result<Vec<TokenId>> {
    let g = on_model!(m, m => eval::generate(m, ext, ids, policy, max_new, stop)?);
    Ok(g.tokens)
}

enum TrainData {
    Docs(Vec<Vec<TokenId>>, TokenId),
    Chat(Vec<Example>),
}

fn metrics_sink(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            ensure_parent(p)
                .and_then(|()| Ok(File::create(p)?))
                .with_context(|| format!("creating metrics file {}", p.display()))?,
        )),
        None => Box::new(io::stdout()),
    })
}

fn train(
    mut cfg: EngineConfig,
    sft: Option<PathBuf>,
    init: Option<PathBuf>,
    metrics: Option<PathBuf>,
    checkpoint_every: Option<usize>,
) -> Result<()> {
    let Some(out) = cfg.paths.checkpoint.clone() else {
        bail!(UsageError(
            "no checkpoint path: pass --out or set paths.checkpoint".into()
        ));
    };
    ensure_parent(&out)?;
    cfg.train.seed = cfg.seed;
    cfg.train.validate().map_err(|e| UsageError(e.to_string()))?;

    let vocab = match (&cfg.paths.vocab, &cfg.paths.corpus) {
        (Some(v), _) if v.is_file() => load_vocab(v)?,
        (vpath, Some(corpus)) => {
            let docs = read_documents(corpus)?;
            let v = train_vocabulary(
                docs.iter().map(|d| d.as_bytes()),
                cfg.tokenizer.vocab_size,
                &cfg.specials(),
            )?;
            if let Some(p) = vpath {
                ensure_parent(p)?;
                v.save_file(p).with_context(|| format!("writing {}", p.display()))?;
            }
            v
        }
        (Some(v), None) => bail!("vocabulary not found: {} (and no corpus to train one)", v.display()),
        (None, None) => bail!(UsageError("need a corpus or a vocabulary".into())),
    };

    let data = match &sft {
        Some(path) => {
            require_file(path, "chat data")?;
            let convs = chatml::read_jsonl(BufReader::new(File::open(path)?))
                .with_context(|| format!("reading {}", path.display()))?;
            let limit = cfg.train.context + 1;
            let mut examples = Vec::new();
            for c in &convs {
                let s = chatml::render(c, &vocab)?;
                let n = s.ids.len().min(limit);
                if n >= 2 && s.mask[1..n].contains(&1) {
                    examples.push(Example::from_masked(&s.ids[..n], &s.mask[..n]));
                }
            }
            if examples.is_empty() {
                bail!("{} holds no conversation with an assistant reply", path.display());
            }
            TrainData::Chat(examples)
        }
        None => {
            let Some(corpus) = &cfg.paths.corpus else {
                bail!(UsageError("no corpus: pass --corpus or set paths.corpus".into()));
            };
            let docs = read_documents(corpus)?;
            let eod = vocab.special_id(ENDOFTEXT).context("vocabulary lacks <|endoftext|>")?;
            TrainData::Docs(docs.iter().map(|d| vocab.encode(d, false).ids).collect(), eod)
        }
    };

    let mut sink = metrics_sink(metrics.as_ref())?;
    let job = TrainJob {
        cfg: &cfg,
        data,
        out: &out,
        sink: &mut sink,
        every: checkpoint_every,
    };
    match init {
        Some(p) => on_model!(load_model(&p)?, m => job.run(m)),
        None => {
            let mut mc = cfg.model.clone();
            if mc.vocab_size == 0 {
                mc.vocab_size = vocab.size();
            } else if mc.vocab_size != vocab.size() {
                bail!(UsageError(format!(
                    "model.vocab_size {} does not match the vocabulary ({})",
                    mc.vocab_size,
                    vocab.size()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            match mc.precision {
                Precision::Fp32 => job.run(Model::<f32>::init(mc, &mut rng).map_err(|e| UsageError(e.to_string()))?),
                Precision::Fp64 => job.run(Model::<f64>::init(mc, &mut rng).map_err(|e| UsageError(e.to_string()))?),
            }
        }
    }
}

struct TrainJob<'a> {
    cfg: &'a EngineConfig,
    data: TrainData,
    out: &'a Path,
    sink: &'a mut Box<dyn Write>,
    every: Option<usize>,
}

impl TrainJob<'_> {
    fn run<T: Float>(self, mut model: Model<T>) -> Result<()> {
        let tc = &self.cfg.train;
        let batches: Box<dyn Iterator<Item = Batch> + Send> = match &self.data {
            TrainData::Docs(docs, eod) => Box::new(pretraining_batches(docs, *eod, tc)?),
            TrainData::Chat(ex) => Box::new(shuffled_batches(ex.clone(), tc.batch_size, tc.seed)?),
        };
        let mut opt = AdamW::new(&model.cfg);
        writeln!(self.sink, "step,loss,lr,grad_norm")?;
        let mut failure: Option<anyhow::Error> = None;
        let sink = self.sink;
        let out = self.out;
        let every = self.every;
        let history = run_training(&mut model, &mut opt, batches, tc, 0, |m: &StepMetrics, model| {
            let r = writeln!(sink, "{},{:.6},{:.6e},{:.6}", m.step, m.loss, m.lr, m.grad_norm)
                .and_then(|()| sink.flush())
                .map_err(anyhow::Error::from)
                .and_then(|()| match every {
                    Some(k) if k > 0 && m.step % k == 0 => save_checkpoint(model, out).map_err(Into::into),
                    _ => Ok(()),
                });
            match r {
                Ok(()) => ControlFlow::Continue(()),
                Err(e) => {
                    failure = Some(e);
                    ControlFlow::Break(())
                }
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        save_checkpoint(&model, out).with_context(|| format!("writing checkpoint {}", out.display()))?;
        if let (Some(first), Some(last)) = (history.first(), history.last()) {
            eprintln!(
                "trained {} steps: loss {:.4} -> {:.4}; checkpoint {}",
                history.len(),
                first.loss,
                last.loss,
                out.display()
            );
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn eval_ppl(
    model: &Path,
    corpus: &Path,
    vocab: &Path,
    lengths: &[usize],
    techniques: &[String],
    max_sequences: Option<usize>,
    out: Option<PathBuf>,
    plot: Option<PathBuf>,
) -> Result<()> {
    require_file(corpus, "corpus")?;
    let v = load_vocab(vocab)?;
    let eod = v.special_id(ENDOFTEXT).context("vocabulary lacks <|endoftext|>")?;
    let mut stream = Vec::new();
    for d in read_documents(corpus)? {
        stream.extend(v.encode(&d, false).ids);
        stream.push(eod);
    }
    let corpus_id = corpus
        .file_name()
        .map_or("corpus".into(), |n| n.to_string_lossy().into_owned());
    let model_id = model
        .file_name()
        .map_or("model".into(), |n| n.to_string_lossy().into_owned());
    let m = load_model(model)?;
    let ctx = on_model!(&m, m => m.cfg.train_context);
    let techs = techniques
        .iter()
        .map(|t| ExtensionConfig::from_label(t, ctx).map_err(|e| UsageError(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let streams = [stream];
    let ids = (corpus_id.as_str(), model_id.as_str());
    let report = on_model!(&m, m => eval::length_sweep(m, &techs, lengths, &streams, max_sequences, ids)?);
    match out {
        Some(p) => ensure_parent(&p)
            .and_then(|()| Ok(std::fs::write(&p, report.to_csv())?))
            .with_context(|| format!("writing {}", p.display()))?,
        None => write!(io::stdout(), "{}", report.to_csv())?,
    }
    if let Some(p) = plot {
        ensure_parent(&p)?;
        std::fs::write(&p, report.render_text()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn bench_compression(vocab: &Path, baseline: &Path, corpora: &[String]) -> Result<()> {
    let ours = load_vocab(vocab)?;
    let theirs = load_vocab(baseline)?;
    let mut sets = Vec::new();
    for c in corpora {
        let Some((label, path)) = c.split_once('=') else {
            bail!(UsageError(format!("--corpus expects LABEL=PATH, got `{c}`")));
        };
        let docs = read_documents(Path::new(path))?;
        sets.push((label.to_string(), docs.into_iter().map(String::into_bytes).collect()));
    }
    let rows = eval::compression_benchmark(&ours, &theirs, &sets)?;
    writeln!(io::stdout(), "language,documents,compression_rate")?;
    for r in rows {
        writeln!(io::stdout(), "{},{},{:.6}", r.language, r.documents, r.rate)?;
    }
    Ok(())
}

fn chat(
    model: &Path,
    vocab: &Path,
    system: Option<String>,
    max_new: usize,
    policy: SamplingPolicy,
    ext: &ExtensionConfig,
) -> Result<()> {
    let v = load_vocab(vocab)?;
    let im_end = v.special_id(IM_END).context("vocabulary lacks <|im_end|>")?;
    let mut conv = Conversation::default();
    if let Some(s) = system {
        conv.push(Role::System, s)?;
    }
    let m = load_model(model)?;
    let stdin = io::stdin();
    let mut stdout = io::stdout();
    write!(stdout, "> ")?;
    stdout.flush()?;
    for line in stdin.lock().lines() {
        let line = line?;
        let text = line.trim();
        if text == "/exit" {
            break;
        }
        if !text.is_empty() {
            conv.push(Role::User, text)?;
            let prompt = chatml::generation_prompt(&conv, &v)?;
            let reply = generate_tokens(&m, ext, &prompt, policy, max_new, &[im_end])?;
            let reply = v.decode_lossy(&reply)?;
            writeln!(stdout, "{reply}")?;
            // The model may emit special-token text; keep the conversation valid.
            let clean = [ENDOFTEXT, IM_START, IM_END]
                .iter()
                .fold(reply, |r, s| r.replace(s, ""));
            conv.push(Role::Assistant, clean)?;
        }
        write!(stdout, "> ")?;
        stdout.flush()?;
    }
    writeln!(stdout)?;
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    require_file(path, "checkpoint")?;
    let cfg = load_config(path)?;
    let tensors = decode_tensors(&std::fs::read(path)?)?;
    writeln!(io::stdout(), "{}", serde_json::to_string_pretty(&cfg)?)?;
    writeln!(io::stdout(), "{:<24} {:<5} shape", "tensor", "dtype")?;
    let mut total = 0usize;
    for (name, t) in &tensors {
        total += t.shape().iter().product::<usize>();
        writeln!(
            io::stdout(),
            "{name:<24} {:<5} {:?}",
            format!("{:?}", t.dtype()).to_lowercase(),
            t.shape()
        )?;
    }
    writeln!(io::stdout(), "{} tensors, {total} parameters", tensors.len())?;
    Ok(())
}
