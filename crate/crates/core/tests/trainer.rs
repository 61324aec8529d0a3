use gfn::config::parse_config;
use gfn::exact::true_distribution;
use gfn::losses::LossKind;
use gfn::Trainer64;

fn trainer(args: &[&str]) -> Trainer64 {
    let argv = std::iter::once("gfn-train").chain(args.iter().copied());
    Trainer64::new(&parse_config(argv).unwrap()).unwrap()
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 { 0.5 * (v[m - 1] + v[m]) } else { v[m] }
}

#[test]
fn loss_trends_down_for_every_pairing() {
    let envs: [&[&str]; 2] = [&["--env", "HyperGrid", "--env.ndim", "2", "--env.height", "4"], &[
        "--env",
        "DiscreteEBM",
        "--env.ndim",
        "3",
    ]];
    let n = 600;
    for env in envs {
        for kind in LossKind::ALL {
            if kind == LossKind::ModifiedDB && env[1] == "DiscreteEBM" {
                continue;
            }
            let name = kind.to_string();
            let iters = n.to_string();
            let mut args = env.to_vec();
            args.extend([
                "--loss",
                name.as_str(),
                "--hidden_dim",
                "32",
                "--n_hidden_layers",
                "1",
                "--batch_size",
                "16",
                "--n_iterations",
                iters.as_str(),
                "--seed",
                "3",
            ]);
            let mut t = trainer(&args);
            let losses: Vec<f64> = (0..n).map(|_| t.step().unwrap()).collect();
            let k = n / 10;
            let (head, tail) = (median(&losses[..k]), median(&losses[n - k..]));
            assert!(tail < head, "{} on {}: head median {head}, tail median {tail}", name, env[1]);
        }
    }
}

#[test]
fn tb_log_z_gap_settles_after_first_quartile() {
    let args = [
        "--env.height",
        "4",
        "--loss",
        "TB",
        "--logit_PF.module_name",
        "Tabular",
        "--logit_PB.module_name",
        "Tabular",
        "--optim",
        "sgd",
        "--optim.lr",
        "0.1",
    ];
    let mut t = trainer(&args);
    let (_, truth) = true_distribution::<f64>(t.env(), 1_000_000).unwrap();
    let (n, every) = (2000, 100);
    let mut gaps = Vec::new();
    for i in 1..=n {
        t.step().unwrap();
        if i % every == 0 && i > n / 4 {
            gaps.push((t.log_z().unwrap() - truth).abs());
        }
    }
    for w in gaps.windows(2) {
        assert!(w[1] <= w[0] + 0.05, "gap grew: {gaps:?}");
    }
    assert!(*gaps.last().unwrap() < 0.01, "final gap {}", gaps.last().unwrap());
}

#[test]
fn two_by_two_tabular_example_converges() {
    for extra in [&[][..], &["--optim", "sgd", "--optim.lr", "0.1"][..]] {
        let mut args = vec![
            "--env.height",
            "2",
            "--loss",
            "TB",
            "--logit_PF.module_name",
            "Tabular",
            "--logit_PB.module_name",
            "Tabular",
        ];
        args.extend_from_slice(extra);
        let mut t = trainer(&args);
        for _ in 0..2000 {
            t.step().unwrap();
        }
        assert!(t.l1_distance().unwrap().unwrap() < 0.01);
        assert!((t.log_z().unwrap() - 2.4f64.ln()).abs() < 0.01);
    }
}
