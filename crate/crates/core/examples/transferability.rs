//! The full pipeline on a reduced corpus: attack each detector, then report
//! the TPR drop every detector suffers on every attack set.

use evasim::corpus::GenConfig;
use evasim::detect::DetectorId;
use evasim::pipeline::{run_all, Layout, PipelineConfig};

fn main() -> evasim::Result<()> {
    let dir = tempfile::tempdir().expect("temporary directory");
    let mut cfg = PipelineConfig::new(0);
    cfg.corpus = GenConfig {
        n_benign: 100,
        n_malware: 100,
        ..GenConfig::default()
    };
    let report = run_all(&Layout::under(dir.path()), &cfg)?;
    print!("{:<18}", "attack set");
    for d in DetectorId::ALL {
        print!("{:>10}", d.name());
    }
    println!("   (TPR drop, percentage points)");
    for set in &report.sets {
        print!("{:<18}", set.name);
        for d in DetectorId::ALL {
            print!("{:>10.1}", 100.0 * set.tpr_drop(d).unwrap_or(f64::NAN));
        }
        println!();
    }
    Ok(())
}
