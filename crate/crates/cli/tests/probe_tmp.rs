// temporary probe: recon metrics of an AE artifact dir (ignored by default)
use musemask_cli::commands;
use musemask_cli::config::RunConfig;
use musemask_cli::evalsuite;
use musemask_core::synth_dataset::Corpus;
use std::path::Path;

#[test]
#[ignore]
fn probe_ae_recon() {
    let dir = std::env::var("PROBE_DIR").unwrap();
    let cfgp = std::env::var("PROBE_CFG").unwrap();
    let cfg = RunConfig::load(Path::new(&cfgp)).unwrap();
    let corpus = Corpus::open(&Path::new(&dir).join("corpus")).unwrap();
    let (ae, _) = commands::load_ae(&cfg, &Path::new(&dir).join(commands::AE_SKIPS)).unwrap();
    let r = evalsuite::eval_ae_recon(&cfg, &corpus, &ae, 48).unwrap();
    println!("plain: psnr {:.2} acc {:.4}", r.psnr_plain, r.acc_plain);
    println!("gated: psnr {:.2} acc {:.4}", r.psnr_gated, r.acc_gated);
    println!("gain:  psnr {:+.2} acc {:+.4}", r.psnr_gated - r.psnr_plain, r.acc_gated - r.acc_plain);
    println!("mae inside {:.4} outside {:.4}", r.mae_inside, r.mae_outside);
}
