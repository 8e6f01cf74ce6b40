// Scratch harness for probing SGD hyperparameters on the synthetic family.
use raglab_core::model::{GradMode, LsaNet};
use raglab_core::task::{InterfaceKind, TaskConfig, TaskSampler};
use raglab_core::train::{train, TrainConfig};

fn main() {
    let cfg = TaskConfig {
        n_ctx: 5,
        n_input: 3,
        docs: 2,
        d_doc: 3,
        d_y: 1,
        alpha: 1.0,
        query_alpha: 1.0,
        sigma: 1.0,
        interface: InterfaceKind::DotProduct,
        asymmetric_m: false,
    };
    let dims = cfg.token_dims();
    for (init, lr, mom, steps, batch) in [
        (0.1, 1e-2, 0.0, 2000u64, 32usize),
        (0.1, 3e-3, 0.9, 2000, 32),
        (0.3, 1e-2, 0.0, 2000, 32),
        (0.1, 1e-2, 0.0, 2000, 64),
    ] {
        let net = LsaNet::new_lsa(dims, init, 3);
        let trs = TaskSampler::new(cfg.clone(), 12).unwrap();
        let vas = TaskSampler::new(cfg.clone(), 13).unwrap();
        let mut tc = TrainConfig::new(steps, batch, lr, 12);
        tc.momentum = mom;
        tc.grad_mode = GradMode::ClosedForm;
        match train(net, &tc, move |i| trs.task(i).episode(), move |i| vas.task(i).episode()) {
            Ok(res) => {
                let pick: Vec<String> = [1usize, 50, 100, 200, 400, 600, 1000, 1500, 2000]
                    .iter()
                    .filter(|&&s| s <= steps as usize)
                    .map(|&s| format!("{}:{:.3}", s, res.curve[s - 1].train_loss))
                    .collect();
                println!("init {init} lr {lr} mom {mom} B{batch}: {}", pick.join(" "));
            }
            Err(e) => println!("init {init} lr {lr} mom {mom} B{batch}: DIVERGED {e}"),
        }
    }
}
