use online_wpe::acoustics::*;
use online_wpe::eval::*;
use online_wpe::pipeline::*;
use online_wpe::training::*;
use online_wpe::*;
#[test]
fn exp() {
    let cfg = DataConfig { num_sequences: 15, sequence_secs: 10.0, utterance_min_secs: 1.5, utterance_max_secs: 3.0, ..DataConfig::default() };
    let st = StftConfig::default();
    let pairs: Vec<_> = (0..15).map(|i| render_item(&cfg, i, Scenario::Ha).unwrap()).collect();
    // held-out: items 1, 5, 9, 13 (spread over T60)
    let held: Vec<usize> = vec![1, 5, 9, 13];
    let seqs: Vec<_> = (0..15).filter(|i| !held.contains(i)).map(|i| { let p = &pairs[i];
        let x = analyze(&p.reverberant, &st).unwrap(); let t = analyze(&p.target, &st).unwrap();
        PreparedSequence::new(format!("{i}"), p.meta.t60, x, &t).unwrap() }).collect();
    let items: Vec<_> = held.iter().map(|&i| EvalItem { id: format!("{i}"), t60: pairs[i].meta.t60, input: pairs[i].reverberant.clone(), target: pairs[i].target.clone() }).collect();
    let model: MaskModel64 = init_params(1, NetDims { input_dim: 257, hidden_dim: 64 }, false).unwrap();
    let wpe = WpeConfig::default();
    let pcfg = PipelineConfig::default();
    let mean_elr = |m: Option<&MaskModel64>, alg: Algorithm| -> f64 {
        items.iter().map(|it| { let o = run_algorithm(&SuiteEntry { algorithm: alg, model: m.cloned() }, it, &pcfg).unwrap(); elr(&o, &it.target, 4.0).unwrap() }).sum::<f64>() / 4.0 };
    eprintln!("held-out ELR: unproc {:.2} vanilla {:.2} oracle {:.2} random-dnn {:.2}", mean_elr(None, Algorithm::Unprocessed), mean_elr(None, Algorithm::VanillaWpe), mean_elr(None, Algorithm::OracleWpe), mean_elr(Some(&model), Algorithm::DnnWpe));
    let t = std::time::Instant::now();
    let tc = TrainConfig { lr: 3e-3, max_epochs: 20, batch_size: 2, segment_frames: 200, ..TrainConfig::default() };
    let pre = pretrain(model.clone(), &seqs, &tc).unwrap();
    eprintln!("pretrain {:?} best {}", t.elapsed(), pre.best_epoch);
    for r in &pre.history { eprintln!("  {} {:.4} {:?}", r.epoch, r.train_loss, r.val_loss); }
    eprintln!("held-out ELR pretrained {:.2}", mean_elr(Some(&pre.model), Algorithm::DnnWpe));
    for lr in [1e-3, 3e-3] {
        let t = std::time::Instant::now();
        let tc = TrainConfig { lr, max_epochs: 6, batch_size: 2, segment_frames: 200, ..TrainConfig::default() };
        let ft = train_e2e(pre.model.clone(), &seqs, &wpe, &tc).unwrap();
        eprintln!("finetune lr {lr} {:?} best {}", t.elapsed(), ft.best_epoch);
        for r in &ft.history { eprintln!("  {} {:.4} {:?}", r.epoch, r.train_loss, r.val_loss); }
        eprintln!("held-out ELR e2e-p {:.2}", mean_elr(Some(&ft.model), Algorithm::DnnWpe));
    }
}
