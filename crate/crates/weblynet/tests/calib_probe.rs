// Temporary calibration probe (deleted after tuning).
use weblynet::data::Dataset;
use weblynet::eval::report_from_scores;
use weblynet::networks::Mode;
use weblynet::optim::Which;
use weblynet::eval::evaluate;
use weblynet::pipeline::*;
use weblynet::networks::Scale;
use weblynet::tensor::Tape;

fn score_mode(system: &weblynet::optim::TrainedSystem, ds: &Dataset, mode: Mode) -> Vec<Vec<f64>> {
    ds.recordings
        .iter()
        .map(|rec| {
            let net = &system.networks[0];
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape);
            let item = rec.train_item();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
            let (out, _) = net
                .forward_recording(&mut tape, &bound, item.views(), mode, Some(&mut rng))
                .unwrap();
            tape.data(out).to_vec()
        })
        .collect()
}

#[test]
#[ignore]
fn pilot_bn_diagnosis() {
    let bench = SyntheticBenchmark {
        n_train: 600,
        n_test: 200,
        n_pretrain: 100,
        fp_rates: vec![],
        ..Default::default()
    };
    let scale = Scale::new(1, 8);
    let data = bench.generate(101).unwrap();
    let (n1_init, _) = init_task_networks(10, 128, 16, scale, 101).unwrap();
    let (n1_self, _) = self_train(n1_init, &data.train, 15, 32, 3e-3, 101).unwrap();

    let eval_test = evaluate(&n1_self, &data.test, Which::Network(0), "n1").unwrap();
    println!("eval-mode  test MAP {:.4}", eval_test.map);
    let tr_scores = score_mode(&n1_self, &data.test, Mode::Train);
    let r = report_from_scores(&tr_scores, &data.test, "train-mode").unwrap();
    println!("train-mode test MAP {:.4}", r.map);
    let ev_train = score_mode(&n1_self, &data.train, Mode::Eval);
    let r = report_from_scores(&ev_train, &data.train, "евal-train").unwrap();
    println!("eval-mode  TRAIN set MAP {:.4}", r.map);
    let tm_train = score_mode(&n1_self, &data.train, Mode::Train);
    let r = report_from_scores(&tm_train, &data.train, "train-train").unwrap();
    println!("train-mode TRAIN set MAP {:.4}", r.map);
}
