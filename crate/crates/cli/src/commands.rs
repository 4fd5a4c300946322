use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use backdep::analysis::{
    alignment_uniformity, degradation_sweep, detect_turning_point, pivot_dependency_scores, AnisotropyInputs,
    PivotPosition, SweepMode,
};
use backdep::evaluation::{evaluate_sts, spearman, transfer_probe, ProbeConfig, SimilarityRecord};
use backdep::io::{
    config_hash, load_checkpoint, load_corpus, load_labels, load_matrix, load_pair_dataset, load_sentences,
    load_triplet_dataset, output_path, report, save_checkpoint, write_corpus, write_matrix, write_pair_dataset,
    write_sentences, write_triplet_dataset, Checkpoint, RunConfig, TrainingMetadata,
};
use backdep::synth::TemplateGrammar;
use backdep::training::{prepare, train, Triplet};
use backdep::{DirectionPlan, Embedder, Error, LoraConfig, ModelParams, PromptTemplate, Result, Strategy};

use crate::{
    AblateArgs, AnalyzeDepArgs, AnisotropyArgs, Cli, Command, DegradeArgs, EmbedArgs, EvalStsArgs, GenDataArgs,
    ProbeArgs, RetrieveArgs, TrainArgs, TrainOverrides,
};

/// Resolved output directory: flag or environment, then config, then `out`.
struct Out(PathBuf);

impl Out {
    fn file(&self, name: &str) -> Result<PathBuf> {
        output_path(&self.0, name)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let flag = cli.out_dir;
    let out = |cfg: Option<&RunConfig>| Out(flag.clone().or_else(|| cfg.map(|c| c.out_dir.clone())).unwrap_or_else(|| "out".into()));
    match cli.command {
        Command::Train(a) => {
            let cfg = run_config(&a.overrides)?;
            let out = out(Some(&cfg));
            train_cmd(a, cfg, &out)
        }
        Command::EvalSts(a) => eval_sts(a),
        Command::Degrade(a) => {
            let cfg = run_config(&a.overrides)?;
            degrade(a, cfg, &out(None))
        }
        Command::AnalyzeDep(a) => analyze_dep(a, &out(None)),
        Command::Anisotropy(a) => anisotropy(a),
        Command::Retrieve(a) => retrieve(a, &out(None)),
        Command::Probe(a) => probe(a),
        Command::GenData(a) => gen_data(a, &out(None)),
        Command::Ablate(a) => {
            let cfg = run_config(&a.overrides)?;
            let out = out(Some(&cfg));
            ablate(a, cfg, &out)
        }
        Command::Embed(a) => embed(a, &out(None)),
    }
}

fn run_config(o: &TrainOverrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    t.steps = o.steps.unwrap_or(t.steps);
    t.seed = o.seed.unwrap_or(t.seed);
    t.learning_rate = o.learning_rate.unwrap_or(t.learning_rate);
    t.batch_size = o.batch_size.unwrap_or(t.batch_size);
    t.temperature = o.temperature.unwrap_or(t.temperature);
    if o.any_batch_size {
        t.restrict_batch_to_grid = false;
    }
    let m = &mut cfg.model;
    m.d_model = o.d_model.unwrap_or(m.d_model);
    m.n_heads = o.heads.unwrap_or(m.n_heads);
    m.n_layers = o.layers.unwrap_or(m.n_layers);
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs, mut cfg: RunConfig, out: &Out) -> Result<()> {
    if let Some(s) = &a.strategy {
        cfg.train.strategy = s.parse()?;
    }
    if let Some(rank) = a.lora_rank {
        cfg.train.lora = Some(LoraConfig {
            rank,
            ..LoraConfig::default()
        });
    }
    if a.turning_point.is_some() {
        cfg.plan.turning_point = a.turning_point;
    }
    let base = match &a.init {
        Some(path) => {
            let model = load_checkpoint(path)?.model;
            cfg.model = model.config.clone();
            model
        }
        None => ModelParams::init(cfg.model.clone(), cfg.train.seed)?,
    };
    cfg.validate()?;
    let path = a
        .triplets
        .or_else(|| cfg.data.triplets.clone())
        .ok_or_else(|| Error::Config("no triplet file: pass --triplets or set data.triplets".into()))?;
    let data = load_triplet_dataset(&path)?;

    // an explicit plan bypasses the strategy and keeps the model's depth
    let (model, plan) = match cfg.plan.turning_point {
        Some(t) => {
            let model = match &cfg.train.lora {
                Some(lora) => base.lora_wrap(lora, cfg.train.seed)?,
                None => base,
            };
            let plan = DirectionPlan::new(model.n_layers(), t)?;
            (model, plan)
        }
        None => prepare(&base, &cfg.train)?,
    };
    let outcome = train(&model, &plan, &data, &cfg.train)?;
    let checkpoint = Checkpoint {
        model: outcome.model,
        plan,
        metadata: TrainingMetadata {
            seed: cfg.train.seed,
            steps: cfg.train.steps,
            config_hash: config_hash(&cfg)?,
        },
    };
    let ckpt_path = match a.output {
        Some(p) => p,
        None => out.file("model.ckpt")?,
    };
    save_checkpoint(&checkpoint, &ckpt_path)?;
    let loss_path = report::emit_losses(&outcome.losses, &out.0)?;
    println!("steps\t{}", outcome.losses.len());
    println!("final_loss\t{}", outcome.losses.last().copied().unwrap_or(f64::NAN));
    println!("checkpoint\t{}", ckpt_path.display());
    println!("losses\t{}", loss_path.display());
    Ok(())
}

fn read_scores(path: &Path) -> Result<Vec<f64>> {
    let rows = load_matrix(path)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, r)| match r.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected one score per line".into(),
            }),
        })
        .collect()
}

fn eval_sts(a: EvalStsArgs) -> Result<()> {
    let records = load_pair_dataset(&a.pairs)?;
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    let rho = match (&a.predictions, &a.checkpoint) {
        (Some(p), _) => {
            let predicted = read_scores(p)?;
            let gold: Vec<f64> = records.iter().map(|r| r.gold).collect();
            spearman(&predicted, &gold)?
        }
        (None, Some(c)) => {
            let ck = load_checkpoint(c)?;
            evaluate_sts(&ck.model, &ck.plan, &records, &PromptTemplate::standard())?
        }
        (None, None) => return Err(Error::Config("pass --checkpoint or --predictions".into())),
    };
    println!("rho={rho:.6}");
    Ok(())
}

fn degrade(a: DegradeArgs, cfg: RunConfig, out: &Out) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let suite = a
        .pairs
        .iter()
        .map(load_pair_dataset)
        .collect::<Result<Vec<Vec<SimilarityRecord>>>>()?;
    let retrain_data = a.retrain.as_ref().map(load_triplet_dataset).transpose()?;
    let mode = match &retrain_data {
        Some(data) => SweepMode::Retrain {
            config: &cfg.train,
            data,
        },
        None => SweepMode::AsIs,
    };
    let curve = degradation_sweep(&ck.model, &suite, &PromptTemplate::standard(), mode)?;
    report::emit_curve(&curve, &out.0)?;
    for (k, rho) in &curve.points {
        println!("layers={k}\trho={rho:.6}");
    }
    let tp = detect_turning_point(&curve)?;
    println!("turning_point={}\tdrop={:.6}", tp.layers, tp.drop);
    Ok(())
}

fn analyze_dep(a: AnalyzeDepArgs, out: &Out) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let sentences = load_sentences(&a.sentences)?;
    let pivot: PivotPosition = a.pivot.parse()?;
    let causal = DirectionPlan::all_uni(ck.model.n_layers())?;
    let own = pivot_dependency_scores(&ck.model, &ck.plan, &sentences, pivot)?;
    let uni = pivot_dependency_scores(&ck.model, &causal, &sentences, pivot)?;
    let labelled = [("checkpoint-plan", &own), ("all-causal", &uni)];
    report::emit_dependency(&labelled, &out.0)?;
    for (label, r) in labelled {
        let s = r.summary;
        println!(
            "{label}\tmean={:.6}\tmin={:.6}\tq1={:.6}\tmedian={:.6}\tq3={:.6}\tmax={:.6}\tskipped={}",
            s.mean,
            s.min,
            s.q1,
            s.median,
            s.q3,
            s.max,
            r.skipped.len()
        );
    }
    Ok(())
}

fn anisotropy(a: AnisotropyArgs) -> Result<()> {
    let data = load_matrix(&a.data)?;
    let left = load_matrix(&a.left)?;
    let right = load_matrix(&a.right)?;
    if left.len() != right.len() {
        return Err(Error::Shape(format!("{} left rows but {} right rows", left.len(), right.len())));
    }
    let (align, uniform) = alignment_uniformity(&AnisotropyInputs {
        data,
        positives: left.into_iter().zip(right).collect(),
    })?;
    println!("alignment={align:.6}");
    println!("uniformity={uniform:.6}");
    Ok(())
}

fn retrieve(a: RetrieveArgs, out: &Out) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let template = PromptTemplate::standard();
    let embedder = Embedder::new(&ck.model, &ck.plan, &template);
    let mut corpus = load_corpus(&a.corpus)?;
    corpus.embed_with(|text| embedder.embed(text, None))?;
    let results = corpus.run_queries()?;
    let mut listing = String::from("query\tretrieved\treferences\n");
    let join = |ids: &mut dyn Iterator<Item = &usize>| ids.map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    for (q, got) in &results {
        writeln!(listing, "{q}\t{}\t{}", join(&mut got.iter()), join(&mut corpus.groups[q].iter())).unwrap();
    }
    fs::write(out.file("retrieval.tsv")?, listing)?;
    println!("strict_accuracy={:.6}", corpus.strict_accuracy()?);
    Ok(())
}

fn labelled(embeddings: &Path, labels: &Path) -> Result<Vec<(Vec<f64>, usize)>> {
    let x = load_matrix(embeddings)?;
    let y = load_labels(labels)?;
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} embeddings but {} labels", x.len(), y.len())));
    }
    Ok(x.into_iter().zip(y).collect())
}

fn probe(a: ProbeArgs) -> Result<()> {
    let train_set = labelled(&a.train_embeddings, &a.train_labels)?;
    let test_set = labelled(&a.test_embeddings, &a.test_labels)?;
    let acc = transfer_probe(&train_set, &test_set, &ProbeConfig::default())?;
    println!("accuracy={acc:.6}");
    Ok(())
}

fn gen_data(a: GenDataArgs, out: &Out) -> Result<()> {
    let grammar = if a.synonyms {
        TemplateGrammar::with_synonyms(a.seed)
    } else {
        TemplateGrammar::standard(a.seed)
    };
    let sentences: Vec<String> = grammar
        .gen_sts_pairs(a.sentences)?
        .into_iter()
        .map(|r| r.sentence_1)
        .collect();
    let files = [
        ("triplets.tsv", write_triplet_dataset(out.file("triplets.tsv")?, &grammar.gen_triplets(a.triplets)?)),
        ("sts.tsv", write_pair_dataset(out.file("sts.tsv")?, &grammar.gen_sts_pairs(a.pairs)?)),
        (
            "csts.tsv",
            write_pair_dataset(out.file("csts.tsv")?, &grammar.gen_conditional_pairs(a.conditional)?),
        ),
        (
            "corpus.tsv",
            write_corpus(out.file("corpus.tsv")?, &grammar.gen_retrieval_groups(a.groups, a.captions)?),
        ),
        ("sentences.txt", write_sentences(out.file("sentences.txt")?, &sentences)),
    ];
    for (name, written) in files {
        written?;
        println!("{}", out.0.join(name).display());
    }
    Ok(())
}

fn ablate(a: AblateArgs, cfg: RunConfig, out: &Out) -> Result<()> {
    let seed = cfg.train.seed;
    let data: Vec<Triplet> = match &a.triplets {
        Some(p) => load_triplet_dataset(p)?,
        None => TemplateGrammar::standard(seed).gen_triplets(2000)?,
    };
    let pairs = match &a.pairs {
        Some(p) => load_pair_dataset(p)?,
        None => TemplateGrammar::standard(seed.wrapping_add(1)).gen_sts_pairs(300)?,
    };
    let base = ModelParams::init(cfg.model.clone(), seed)?;
    let reference = match &cfg.train.lora {
        Some(lora) => base.lora_wrap(lora, seed)?.num_params(),
        None => base.num_params(),
    };
    let mut csv = String::from("strategy,added_params,spearman\n");
    println!("strategy\tadded_params\tspearman");
    for strategy in [Strategy::Modification, Strategy::Addition] {
        let mut tc = cfg.train.clone();
        tc.strategy = strategy;
        let (model, plan) = prepare(&base, &tc)?;
        let added = model.num_params() - reference;
        let trained = train(&model, &plan, &data, &tc)?.model;
        let rho = evaluate_sts(&trained, &plan, &pairs, &tc.template)?;
        println!("{}\t{added}\t{rho:.6}", strategy.label());
        writeln!(csv, "{},{added},{rho}", strategy.label()).unwrap();
    }
    fs::write(out.file("ablation.csv")?, csv)?;
    Ok(())
}

fn embed(a: EmbedArgs, out: &Out) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let sentences = load_sentences(&a.sentences)?;
    let template = PromptTemplate::standard();
    let rows = Embedder::new(&ck.model, &ck.plan, &template).embed_all(&sentences)?;
    let path = match a.output {
        Some(p) => p,
        None => out.file("embeddings.tsv")?,
    };
    write_matrix(&path, &rows)?;
    println!("{}", path.display());
    Ok(())
}
