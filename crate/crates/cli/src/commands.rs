//! The five subcommands. Each resolves its full `RunConfig` first, logs it to
//! stderr, validates before touching the filesystem, and writes deterministic
//! outputs.

use std::fs;
use std::io::Write as _;

use rayon::prelude::*;

use super::*;

pub fn cmd_gen_data(config: &RunConfig, n: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    config.validate()?;
    let scenes: Vec<Scene> = (0..n)
        .map(|i| generate_scene(seed.wrapping_add(i as u64), &config.scene))
        .collect::<Result<_, _>>()
        .map_err(validation)?;
    write_scenes(out, &scenes).map_err(validation)
}

pub struct PretrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub trace: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

pub fn cmd_pretrain(mut config: RunConfig, args: &PretrainArgs) -> Result<(), CliError> {
    let resumed = match &args.resume {
        Some(path) => {
            let run = load_run(path)?;
            config = run.config;
            Some(TrainState { params: run.checkpoint.params, adam: run.checkpoint.adam, step: run.checkpoint.step })
        }
        None => None,
    };
    config.validate()?;
    let vocab = config.finalize();
    eprintln!("resolved config:\n{}", config.render());

    let scenes = read_scenes(&args.data).map_err(validation)?;
    let encoder = Encoder::new(&config.scene);
    let state = match resumed {
        Some(s) => s,
        None => TrainState::fresh(init_params(&config.model, config.train.seed)),
    };

    let trace_path = args.trace.clone().unwrap_or_else(|| args.out.with_extension("trace"));
    let mut trace_file = fs::File::create(&trace_path)
        .map_err(|e| CliError::Validation(format!("cannot write trace {}: {e}", trace_path.display())))?;

    let trainer = Trainer {
        tconfig: &config.train,
        mconfig: &config.model,
        oconfig: &config.objectives,
        vocab: &vocab,
        encoder: &encoder,
        flags: config.flags,
        config_snapshot: config.render(),
    };
    trainer
        .train(&scenes, state, None, Some(&args.out), |line| {
            let _ = writeln!(trace_file, "{}", line.render());
        })
        .map_err(validation)?;
    eprintln!("checkpoint written to {}", args.out.display());
    Ok(())
}

pub struct FinetuneArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub tasks: Vec<Task>,
    pub out: PathBuf,
}

pub fn cmd_finetune(overrides: &[(String, String)], args: &FinetuneArgs) -> Result<(), CliError> {
    if args.tasks.is_empty() {
        return Err(CliError::Usage("at least one task is required".into()));
    }
    let run = load_run(&args.ckpt)?;
    let mut config = run.config;
    for (k, v) in overrides {
        config.apply(k, v)?;
    }
    config.validate()?;
    let vocab = config.finalize();
    eprintln!("resolved config:\n{}", config.render());

    let scenes = read_scenes(&args.data).map_err(validation)?;
    if scenes.is_empty() {
        return Err(CliError::Validation("scene file is empty".into()));
    }

    // Base language model: trained from scratch on the template corpus, then
    // frozen for the whole stage.
    let corpus = lm_corpus(&vocab, &scenes);
    eprintln!("pre-training the base language model ({} steps)...", config.lm_pretrain.steps);
    let lm_params = pretrain_lm(&config.lm, &vocab, &corpus, &config.lm_pretrain).map_err(validation)?;

    let mut params = run.checkpoint.params;
    params.absorb(lm_params);
    init_stage2_params(&mut params, &config.model, &config.lm, &config.lora, config.train.seed)
        .map_err(validation)?;

    let records = build_instruction_dataset(&config, &scenes, &args.tasks)?;
    let instructions_path = args.out.with_extension("instructions");
    fs::write(&instructions_path, instruction_dataset_lines(&records))
        .map_err(|e| CliError::Validation(format!("cannot write {}: {e}", instructions_path.display())))?;

    // Features for every referenced scene, rendered once.
    let encoder = run.encoder;
    let used: std::collections::BTreeSet<&str> = records.iter().map(|r| r.scene_id.as_str()).collect();
    let features: std::collections::BTreeMap<String, mqformer::scene::FeatureBundle> = scenes
        .par_iter()
        .filter(|s| used.contains(s.id.as_str()))
        .map(|s| {
            let enc = encode_scene(&vocab, &encoder, s, config.flags, detection_seed(config.train.seed, &s.id));
            (s.id.clone(), enc.features)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect();

    let sched = TrainConfig {
        peak_lr: config.ft.peak_lr,
        total_steps: config.ft.steps,
        batch_size: config.ft.batch_size,
        seed: config.train.seed,
        ..config.train.clone()
    };
    let mut adam = AdamState::default();
    let trace_path = args.out.with_extension("trace");
    let mut trace_file = fs::File::create(&trace_path)
        .map_err(|e| CliError::Validation(format!("cannot write trace {}: {e}", trace_path.display())))?;

    let mut order: Vec<usize> = Vec::new();
    for step in 0..config.ft.steps {
        let batch_refs: Vec<(&InstructionRecord, &mqformer::scene::FeatureBundle)> = (0..config.ft.batch_size)
            .map(|j| {
                let global = step * config.ft.batch_size + j;
                let epoch = global / records.len();
                while order.len() < (epoch + 1) * records.len() {
                    let e = order.len() / records.len();
                    let mut idx: Vec<usize> = (0..records.len()).collect();
                    use rand::seq::SliceRandom;
                    idx.shuffle(&mut rng_for(&[sched.seed, 0xf7, e as u64]));
                    order.extend(idx);
                }
                let r = &records[order[global]];
                (r, &features[&r.scene_id])
            })
            .collect();
        let lr = cosine_lr(step, &sched);
        let loss = finetune_step(
            &mut params,
            &mut adam,
            &config.model,
            &config.lm,
            &config.lora,
            &vocab,
            &batch_refs,
            lr,
            &sched,
        )
        .map_err(validation)?;
        let _ = writeln!(trace_file, "{step}\t{loss}\t{lr}");
    }

    let ckpt = Checkpoint {
        version: 1,
        config_text: config.render(),
        params,
        adam,
        step: config.ft.steps as u64,
        rng_state: mqformer::trainer::rng_state_bytes(sched.seed, config.ft.steps as u64),
    };
    save_checkpoint(&args.out, &ckpt).map_err(validation)?;
    eprintln!("stage-2 checkpoint written to {}", args.out.display());
    Ok(())
}

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub task: String,
    pub data: PathBuf,
    pub out: Option<PathBuf>,
    pub min_accuracy: Option<f64>,
    pub max_new: usize,
}

/// Builds one evaluation prompt per scene, generates greedily, scores, and
/// writes the report. Exit code 3 when below the accuracy floor.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let run = load_run(&args.ckpt)?;
    let config = run.config;
    let vocab = run.vocab;
    eprintln!("resolved config:\n{}", config.render());
    if !["rec", "vqa", "caption"].contains(&args.task.as_str()) {
        return Err(CliError::Usage(format!("unknown eval task {:?}", args.task)));
    }
    if !run.checkpoint.params.contains("proj.w") {
        return Err(CliError::Validation(
            "checkpoint has no generative stage; run finetune before eval".into(),
        ));
    }

    let scenes = read_scenes(&args.data).map_err(validation)?;
    let ckpt_bytes = fs::read(&args.ckpt)
        .map_err(|e| CliError::Validation(format!("cannot reread checkpoint: {e}")))?;
    let report = evaluate(&config, &vocab, &run.encoder, &run.checkpoint.params, &scenes, &args.task, args.max_new);
    let report = EvalReport {
        config_fingerprint: fingerprint(config.render().as_bytes()),
        checkpoint_fingerprint: fingerprint(&ckpt_bytes),
        ..report
    };

    if let Some(prefix) = &args.out {
        let summary = prefix.with_extension("summary.txt");
        let records = prefix.with_extension("records.jsonl");
        report.write(&summary, &records).map_err(validation)?;
    }
    print!("{}", report.summary());
    if let Some(min) = args.min_accuracy {
        if report.accuracy < min {
            return Err(CliError::Threshold { accuracy: report.accuracy, min });
        }
    }
    Ok(report)
}

/// Shared by the eval command and the acceptance suite.
pub fn evaluate(
    config: &RunConfig,
    vocab: &Vocabulary,
    encoder: &Encoder,
    params: &mqformer::params::ParamStore,
    scenes: &[Scene],
    task: &str,
    max_new: usize,
) -> EvalReport {
    let outputs: Vec<(String, String, String, Option<mqformer::scene::BBox>)> = scenes
        .par_iter()
        .map(|scene| {
            let enc = encode_scene(vocab, encoder, scene, config.flags, detection_seed(config.train.seed, &scene.id));
            let mut rng = rng_for(&[config.train.seed, hash_str(&scene.id), 0xe5a1]);
            let (instruction, target, target_box) = match task {
                "rec" => {
                    let obj = &scene.objects[rand::Rng::gen_range(&mut rng, 0..scene.objects.len())];
                    let instruction = templates_for(Task::Rec)[0].replace("{Tag}", &obj.tag);
                    (instruction, String::new(), Some(obj.bbox))
                }
                "vqa" => {
                    let qa = &scene.qa[rand::Rng::gen_range(&mut rng, 0..scene.qa.len())];
                    let instruction = templates_for(Task::Vqa)[1].replace("{Question}", &qa.question);
                    (instruction, qa.answer.clone(), None)
                }
                _ => (templates_for(Task::ImageCaptioning)[0].to_string(), scene.caption.clone(), None),
            };
            let generation = greedy_generate(
                params,
                &config.model,
                &config.lm,
                &config.lora,
                vocab,
                &enc.features,
                &instruction,
                max_new,
            );
            (scene.id.clone(), generation, target, target_box)
        })
        .collect();

    if task == "rec" {
        let generations: Vec<(String, String, mqformer::scene::BBox)> = outputs
            .into_iter()
            .map(|(id, generation, _, target_box)| (id, generation, target_box.unwrap()))
            .collect();
        rec_accuracy(&generations, "", "")
    } else {
        let items: Vec<(String, String, String)> =
            outputs.into_iter().map(|(id, generation, target, _)| (id, generation, target)).collect();
        match_accuracy(task, &items, "", "")
    }
}

/// Prints the boolean visibility matrix of one objective as a character grid.
pub fn cmd_inspect_masks(layout: &str, objective: &str) -> Result<String, CliError> {
    let parts: Vec<usize> = layout
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("layout must be four comma-separated sizes, got {layout:?}")))?;
    if parts.len() != 4 {
        return Err(CliError::Usage(format!("layout must have four components, got {}", parts.len())));
    }
    let obj = Objective::from_name(objective)
        .ok_or_else(|| CliError::Usage(format!("unknown objective {objective:?}")))?;
    let mask = build_mask(obj, Layout::new(parts[0], parts[1], parts[2], parts[3]));
    Ok(render_mask(&mask))
}
