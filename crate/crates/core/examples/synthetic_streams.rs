//! Build the two built-in streams, print what each environment holds, and
//! round-trip one through CSV.

use gfr::streams::{export_csv_file, ingest_csv_file, DomainOrder, EvalAccess, Stream, StreamSpec};

fn describe(name: &str, stream: &Stream) {
    println!("{name}: {} environments, {} classes", stream.len(), stream.num_classes);
    let access = EvalAccess::grant();
    for e in &stream.environments {
        let q = e.eval_labels(&access).map(|l| l.len()).unwrap_or(0);
        let mean = |t: &gfr::autodiff::Tensor, c: usize| (0..t.rows()).map(|r| t.get(r, c)).sum::<f64>() / t.rows() as f64;
        println!(
            "  env {}: classes {:?}, support {} rows centred at ({:+.2}, {:+.2}), query {} rows centred at ({:+.2}, {:+.2})",
            e.index,
            e.classes(),
            e.support_y().len(),
            mean(e.support_x(), 0),
            mean(e.support_x(), 1),
            q,
            mean(e.query_x(), 0),
            mean(e.query_x(), 1),
        );
    }
}

fn main() -> gfr::Result<()> {
    let tasks = Stream::build(&StreamSpec::moons_tasks(0))?;
    describe("task drift (moons)", &tasks);
    let domains = Stream::build(&StreamSpec::blob_domains(0, DomainOrder::Ascending))?;
    describe("domain drift (blobs, ascending)", &domains);

    let dir = std::env::temp_dir().join("gfr-example-stream");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("stream.csv");
    export_csv_file(&tasks.environments, &path)?;
    let back = ingest_csv_file(&path)?;
    println!("wrote {} and read it back: identical = {}", path.display(), back == tasks.environments);
    Ok(())
}
