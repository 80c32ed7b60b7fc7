use std::collections::BTreeMap;
use std::ops::{AddAssign, Range};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded};
use serde::Serialize;

use super::{partial_path, Context, PipelineConfig, PipelineError};
use crate::inference::{classify_batch, BatchItem, ClassProbabilities, Classifier, Prediction};
use crate::overlay::{self, ColorMap, SidecarWriter};
use crate::preprocess::{Preprocessor, TileTensor};
use crate::wsi_io::{self, Slide, SlideWriter, Tile, TileCoord};

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct StageTimes {
    pub read: Duration,
    pub preprocess: Duration,
    pub classify: Duration,
    pub blend: Duration,
    pub write: Duration,
}

impl AddAssign for StageTimes {
    fn add_assign(&mut self, o: Self) {
        self.read += o.read;
        self.preprocess += o.preprocess;
        self.classify += o.classify;
        self.blend += o.blend;
        self.write += o.write;
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictSummary {
    pub slide_id: String,
    pub tiles: usize,
    pub batches: usize,
    pub workers: usize,
    pub overlay: PathBuf,
    pub csv: PathBuf,
    /// Summed over workers, so stages can exceed wall time.
    pub stage_times: StageTimes,
    pub wall_time: Duration,
}

/// Loads the configured backend and runs [`predict_with`].
pub fn predict(
    slide_path: &Path,
    cfg: &PipelineConfig,
    out_overlay: &Path,
    out_csv: &Path,
) -> Result<PredictSummary, PipelineError> {
    cfg.validate()?;
    let spec = cfg.backend.as_ref().ok_or_else(|| PipelineError::Config("no backend configured".into()))?;
    let slide = wsi_io::open_slide(slide_path).context(|| format!("opening slide {}", slide_path.display()))?;
    let backend = spec.load().context(|| format!("slide {}: loading backend", slide.id()))?;
    let pre = if backend.needs_pixels() { Some(cfg.preprocessor()?) } else { None };
    predict_with(&slide, backend.as_ref(), spec.batch_size, pre.as_ref(), cfg, out_overlay, out_csv)
}

type BatchOutput = Vec<(Tile, ClassProbabilities)>;

struct Job {
    index: usize,
    tiles: Range<usize>,
}

/// Streams the slide through read → preprocess → classify → blend on
/// `cfg.worker_count()` threads and writes the overlay and CSV in grid order
/// from the calling thread. At most `max(workers·queue_depth, batch_size)`
/// decoded tiles are alive at once. Outputs appear only on success.
pub fn predict_with(
    slide: &Slide,
    backend: &dyn Classifier,
    batch_size: usize,
    pre: Option<&Preprocessor>,
    cfg: &PipelineConfig,
    out_overlay: &Path,
    out_csv: &Path,
) -> Result<PredictSummary, PipelineError> {
    let started = Instant::now();
    let slide_id = slide.id();
    let ts = cfg.tile_size_px;
    let grid = slide.grid(ts);
    let coords: Vec<TileCoord> = grid.coords().collect();
    let batch_size = batch_size.max(1);
    let n_jobs = coords.len().div_ceil(batch_size);
    let workers = cfg.worker_count();
    let budget = (workers * cfg.queue_depth).max(batch_size);

    let csv_tmp = partial_path(out_csv);
    let result = (|| {
        let mut writer = SlideWriter::create(out_overlay, slide.meta(), ts)
            .context(|| format!("slide {slide_id}: creating {}", out_overlay.display()))?;
        let mut csv = SidecarWriter::create(&csv_tmp).context(|| format!("creating {}", out_csv.display()))?;

        let (permit_tx, permit_rx) = bounded::<()>(budget);
        for _ in 0..budget {
            permit_tx.send(()).expect("fresh channel has room");
        }
        let (job_tx, job_rx) = bounded::<Job>(workers);
        let (res_tx, res_rx) = unbounded::<(usize, Result<BatchOutput, PipelineError>)>();
        let abort = AtomicBool::new(false);
        let times = Mutex::new(StageTimes::default());

        let outcome = std::thread::scope(|s| {
            let coords = &coords;
            let abort = &abort;
            s.spawn(move || {
                for (index, chunk) in coords.chunks(batch_size).enumerate() {
                    for _ in chunk {
                        if permit_rx.recv().is_err() {
                            return;
                        }
                    }
                    if abort.load(Ordering::SeqCst) {
                        return;
                    }
                    let start = index * batch_size;
                    if job_tx.send(Job { index, tiles: start..start + chunk.len() }).is_err() {
                        return;
                    }
                }
            });
            for _ in 0..workers {
                let job_rx = job_rx.clone();
                let res_tx = res_tx.clone();
                let (slide_id, times) = (&slide_id, &times);
                s.spawn(move || {
                    for job in job_rx {
                        if abort.load(Ordering::SeqCst) {
                            break;
                        }
                        let mut t = StageTimes::default();
                        let r = run_batch(slide, slide_id, &coords[job.tiles], ts, backend, batch_size, pre, &cfg.overlay, &mut t);
                        *times.lock().expect("times lock") += t;
                        if res_tx.send((job.index, r)).is_err() {
                            break;
                        }
                    }
                });
            }
            drop(res_tx);
            drop(job_rx);

            // Owned here so an early return closes it and unblocks the producer.
            let permit_tx = permit_tx;
            let mut pending: BTreeMap<usize, Result<BatchOutput, PipelineError>> = BTreeMap::new();
            let mut next = 0;
            let mut write_time = Duration::ZERO;
            let fail = |e: PipelineError| {
                abort.store(true, Ordering::SeqCst);
                Err(e)
            };
            while next < n_jobs {
                let Ok((k, r)) = res_rx.recv() else {
                    return fail(PipelineError::WorkerPanic);
                };
                pending.insert(k, r);
                while let Some(r) = pending.remove(&next) {
                    let batch = match r {
                        Ok(b) => b,
                        Err(e) => return fail(e),
                    };
                    let t0 = Instant::now();
                    for (tile, probs) in &batch {
                        let p = Prediction::new(slide_id.as_str(), tile.coord, *probs);
                        if let Err(e) = csv.write(&p).context(|| format!("writing {}", out_csv.display())) {
                            return fail(e);
                        }
                        if let Err(e) = writer.push(tile).context(|| {
                            format!("slide {slide_id}: tile ({}, {}): writing overlay", tile.coord.col, tile.coord.row)
                        }) {
                            return fail(e);
                        }
                    }
                    write_time += t0.elapsed();
                    for _ in 0..batch.len() {
                        let _ = permit_tx.send(());
                    }
                    next += 1;
                }
            }
            Ok(write_time)
        });
        let write_time = outcome?;
        let t0 = Instant::now();
        writer.finish().context(|| format!("slide {slide_id}: finishing {}", out_overlay.display()))?;
        let csv_done = csv
            .finish()
            .context(|| format!("finishing {}", out_csv.display()))
            .and_then(|_| std::fs::rename(&csv_tmp, out_csv).context(|| format!("renaming to {}", out_csv.display())));
        if let Err(e) = csv_done {
            let _ = std::fs::remove_file(out_overlay);
            return Err(e);
        }
        let mut stage_times = times.into_inner().expect("times lock");
        stage_times.write = write_time + t0.elapsed();
        Ok(stage_times)
    })();

    match result {
        Ok(stage_times) => Ok(PredictSummary {
            slide_id,
            tiles: coords.len(),
            batches: n_jobs,
            workers,
            overlay: out_overlay.to_path_buf(),
            csv: out_csv.to_path_buf(),
            stage_times,
            wall_time: started.elapsed(),
        }),
        Err(e) => {
            let _ = std::fs::remove_file(&csv_tmp);
            Err(e)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_batch(
    slide: &Slide,
    slide_id: &str,
    coords: &[TileCoord],
    ts: u32,
    backend: &dyn Classifier,
    batch_size: usize,
    pre: Option<&Preprocessor>,
    map: &ColorMap,
    times: &mut StageTimes,
) -> Result<BatchOutput, PipelineError> {
    let tile_ctx = |c: TileCoord, stage: &str| format!("slide {slide_id}: tile ({}, {}): {stage}", c.col, c.row);
    let mut tiles = Vec::with_capacity(coords.len());
    let t0 = Instant::now();
    for &c in coords {
        tiles.push(wsi_io::read_tile(slide, c, ts).context(|| tile_ctx(c, "reading"))?);
    }
    times.read += t0.elapsed();

    let t0 = Instant::now();
    let tensors: Vec<Option<TileTensor>> = match pre {
        Some(p) => tiles
            .iter()
            .map(|t| p.apply(t).map(Some).context(|| tile_ctx(t.coord, "preprocessing")))
            .collect::<Result<_, _>>()?,
        None => vec![None; tiles.len()],
    };
    times.preprocess += t0.elapsed();

    let t0 = Instant::now();
    let items: Vec<BatchItem<'_>> = tiles
        .iter()
        .zip(&tensors)
        .map(|(t, tensor)| BatchItem { slide_id, coord: t.coord, tensor: tensor.as_ref() })
        .collect();
    let first = coords[0];
    let probs = classify_batch(backend, batch_size, &items).context(|| tile_ctx(first, "classifying batch starting at"))?;
    drop(items);
    times.classify += t0.elapsed();

    let t0 = Instant::now();
    for (tile, p) in tiles.iter_mut().zip(&probs) {
        overlay::render_tile(tile, p, map);
    }
    times.blend += t0.elapsed();
    Ok(tiles.into_iter().zip(probs).collect())
}
