use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use mufm_core::dataset::{
    load_record, mask_dir, parse_stem, read_manifest, read_truth, record_id, scan_source, split_record_id,
    truth_from_manifest, write_manifest, write_truth, ManifestRow, SourceImage, MANIFEST_FILE, TRUTH_FILE,
};
use mufm_core::embedding::DEFAULT_DIM;
use mufm_core::embedding_file::{EmbeddingFile, FileFormat};
use mufm_core::evaluation::{self, load_curve_log, render_report, render_text};
use mufm_core::extractor::{ExtractorConfig, ModelExtractor, PrecomputedTable};
use mufm_core::fsutil::atomic_write;
use mufm_core::imaging::{
    augment as apply_transform, decode_image, encode_png, preprocess, side_by_side, AugmentRanges, PixelImage,
    PreprocessConfig,
};
use mufm_core::knn::{GalleryIndex, IndexError, Metric, UNIT_TOLERANCE};
use mufm_core::matcher::{
    calibrate_threshold, genuine_impostor_scores, match_all, MatchConfig, MatchError, MatchResult,
};
use mufm_core::{Embedding, MaskStatus};
use mufm_service::{AppState, GalleryStore, ImageEmbedder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{
    AugmentArgs, CalibrateArgs, EvaluateArgs, ExtractArgs, Failure, IndexArgs, MatchArgs, ModelArgs, PrepareArgs,
    ServeArgs,
};

const MATCHES_FILE: &str = "matches.jsonl";
const MONTAGE_DIR: &str = "montages";
const MONTAGE_HEIGHT: u32 = 224;

type CmdResult = Result<(), Failure>;

trait OrFail<T> {
    fn data(self) -> Result<T, Failure>;
    fn internal(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrFail<T> for Result<T, E> {
    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(e.into()))
    }

    fn internal(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Internal(e.into()))
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

fn data_err(msg: impl Into<String>) -> Failure {
    Failure::Data(anyhow!(msg.into()))
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display())).internal()
}

/// Prepared-file path of a record, relative to the dataset root.
fn prepared_path(subject: &str, imgid: &str, mask: MaskStatus) -> String {
    format!("{}/{subject}__{imgid}.png", mask_dir(mask))
}

/// Sources listed by a manifest inside the raw tree, when one exists.
fn sources_from_manifest(src: &Path) -> Result<Option<Vec<SourceImage>>, Failure> {
    let path = src.join(MANIFEST_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let rows = read_manifest(&path).data()?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        if row.mask_status == MaskStatus::Unknown {
            return Err(data_err(format!("manifest row {} has unknown mask status", row.id)));
        }
        let bare = row.id.strip_suffix(&format!(".{}", row.mask_status)).unwrap_or(&row.id);
        let imgid = parse_stem(bare).map_or(bare, |(_, imgid)| imgid).to_owned();
        out.push(SourceImage { path: src.join(&row.path), subject: row.subject, imgid, mask: row.mask_status });
    }
    Ok(Some(out))
}

pub fn prepare_dataset(a: &PrepareArgs) -> CmdResult {
    if !a.src.is_dir() {
        return Err(data_err(format!("source directory {} does not exist", a.src.display())));
    }
    let sources = match sources_from_manifest(&a.src)? {
        Some(s) => s,
        None => {
            let (found, problems) = scan_source(&a.src).data()?;
            for p in problems {
                eprintln!("skipped: {p}");
            }
            found
        }
    };
    if sources.is_empty() {
        return Err(data_err(format!("no images found under {}", a.src.display())));
    }

    for mask in [MaskStatus::Masked, MaskStatus::Unmasked] {
        create_dir(&a.dst.join(mask_dir(mask)))?;
    }
    let mut rows = Vec::with_capacity(sources.len());
    let mut seen = HashSet::new();
    let mut failed = 0usize;
    for s in &sources {
        let id = s.id();
        if !seen.insert(id.clone()) {
            eprintln!("skipped: {} duplicates record {id}", s.path.display());
            failed += 1;
            continue;
        }
        let png = fs::read(&s.path)
            .map_err(anyhow::Error::from)
            .and_then(|bytes| Ok(decode_image(&bytes)?))
            .and_then(|img| Ok(encode_png(&img)?));
        let png = match png {
            Ok(png) => png,
            Err(e) => {
                eprintln!("skipped: {}: {e:#}", s.path.display());
                failed += 1;
                continue;
            }
        };
        let rel = prepared_path(&s.subject, &s.imgid, s.mask);
        atomic_write(&a.dst.join(&rel), &png).with_context(|| format!("writing {rel}")).internal()?;
        log::info!("{} -> {rel}", s.path.display());
        rows.push(ManifestRow { id, subject: s.subject.clone(), mask_status: s.mask, path: rel });
    }
    if rows.is_empty() {
        return Err(data_err(format!("all {} inputs failed", sources.len())));
    }
    write_manifest(&a.dst.join(MANIFEST_FILE), &rows).internal()?;
    write_truth(&a.dst.join(TRUTH_FILE), &truth_from_manifest(&rows)).internal()?;
    println!("prepared {} images ({failed} skipped) in {}", rows.len(), a.dst.display());
    Ok(())
}

fn load_manifest(data: &Path) -> Result<Vec<ManifestRow>, Failure> {
    let rows = read_manifest(&data.join(MANIFEST_FILE)).data()?;
    if rows.is_empty() {
        return Err(data_err(format!("{} lists no images", data.join(MANIFEST_FILE).display())));
    }
    Ok(rows)
}

pub fn augment(a: &AugmentArgs) -> CmdResult {
    let rows = load_manifest(&a.data)?;
    for mask in [MaskStatus::Masked, MaskStatus::Unmasked] {
        create_dir(&a.dst.join(mask_dir(mask)))?;
    }
    let ranges = AugmentRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut out_rows = Vec::with_capacity(rows.len() * (a.copies + 1));
    for row in &rows {
        let (subject, imgid, mask) = split_record_id(&row.id)
            .ok_or_else(|| data_err(format!("record id {} is not <subject>__<imgid>.<mask>", row.id)))?;
        let record = load_record(&a.data, row).data()?;
        let mut emit = |imgid: &str, img: &PixelImage| -> CmdResult {
            let rel = prepared_path(subject, imgid, mask);
            atomic_write(&a.dst.join(&rel), &encode_png(img).internal()?).internal()?;
            out_rows.push(ManifestRow {
                id: record_id(subject, imgid, mask),
                subject: subject.to_owned(),
                mask_status: mask,
                path: rel,
            });
            Ok(())
        };
        emit(imgid, &record.image)?;
        for copy in 1..=a.copies {
            let chain = ranges.sample(&mut rng, record.image.width(), record.image.height());
            let mut img = record.image.clone();
            for t in chain {
                img = apply_transform(&img, t).internal()?;
            }
            emit(&format!("{imgid}-aug{copy}"), &img)?;
        }
    }
    write_manifest(&a.dst.join(MANIFEST_FILE), &out_rows).internal()?;
    write_truth(&a.dst.join(TRUTH_FILE), &truth_from_manifest(&out_rows)).internal()?;
    println!("wrote {} images to {}", out_rows.len(), a.dst.display());
    Ok(())
}

fn model_config(path: &Path, m: &ModelArgs) -> ExtractorConfig {
    ExtractorConfig {
        input_layout: m.layout.into(),
        output_kind: m.output_kind.into(),
        expected_dim: m.dim.unwrap_or(DEFAULT_DIM),
        ..ExtractorConfig::model(path)
    }
}

pub fn extract(a: &ExtractArgs) -> CmdResult {
    if !(a.denoise_sigma.is_finite() && a.denoise_sigma >= 0.0) {
        return Err(usage("--denoise-sigma must be a non-negative number"));
    }
    let rows: Vec<Embedding> = match (&a.data, &a.model, &a.precomputed) {
        (_, None, None) => return Err(usage("one of --model or --precomputed is required")),
        (None, Some(_), _) => return Err(usage("--model needs --data")),
        (None, None, Some(p)) => {
            let file = EmbeddingFile::read(p).data()?;
            file.write(&a.out, a.format).internal()?;
            println!("copied {} embeddings to {}", file.rows().len(), a.out.display());
            return Ok(());
        }
        (Some(data), None, Some(p)) => {
            let manifest = load_manifest(data)?;
            let table = PrecomputedTable::load(p, a.model_args.dim).data()?;
            let missing: Vec<&str> =
                manifest.iter().filter(|r| table.get(&r.id).is_none()).map(|r| r.id.as_str()).collect();
            if !missing.is_empty() {
                return Err(data_err(format!("no precomputed embedding for {}", missing.join(", "))));
            }
            manifest
                .iter()
                .map(|r| {
                    let v = table.get(&r.id).expect("checked").values.clone();
                    Embedding::new(r.id.clone(), Some(r.subject.clone()), r.mask_status, v)
                })
                .collect::<Result<_, _>>()
                .data()?
        }
        (Some(data), Some(model), None) => {
            let manifest = load_manifest(data)?;
            let extractor = ModelExtractor::load(&model_config(model, &a.model_args)).data()?;
            let (h, w, _) = extractor.input_dims();
            if h != w {
                return Err(data_err(format!("model input {h}x{w} is not square")));
            }
            let cfg = PreprocessConfig {
                target_size: h as u32,
                to_grayscale: a.grayscale,
                denoise_sigma: a.denoise_sigma,
                ..PreprocessConfig::default()
            };
            let mut out = Vec::with_capacity(manifest.len());
            for r in &manifest {
                let record = load_record(data, r).data()?;
                let tensor = preprocess(&record, &cfg).with_context(|| r.id.clone()).data()?;
                let values = extractor.extract(&tensor).with_context(|| r.id.clone()).data()?;
                out.push(Embedding::new(r.id.clone(), Some(r.subject.clone()), r.mask_status, values).data()?);
            }
            out
        }
        (Some(_), Some(_), Some(_)) => unreachable!("clap rejects --model with --precomputed"),
    };
    let file = EmbeddingFile::from_rows(rows).data()?;
    file.write(&a.out, a.format).internal()?;
    println!("wrote {} embeddings (d={}) to {}", file.rows().len(), file.dimension(), a.out.display());
    Ok(())
}

/// Loads an embedding file, scaling any non-unit rows to unit length.
fn load_units(path: &Path) -> Result<Vec<Embedding>, Failure> {
    let rows = EmbeddingFile::read(path).with_context(|| path.display().to_string()).data()?.into_rows();
    rows.into_iter()
        .map(|e| {
            if e.is_unit(UNIT_TOLERANCE) {
                Ok(e)
            } else {
                Embedding::normalized(e.source_id, e.subject, e.mask_status, &e.values)
            }
        })
        .collect::<Result<_, _>>()
        .with_context(|| path.display().to_string())
        .data()
}

fn split_by_mask(rows: Vec<Embedding>) -> (Vec<Embedding>, Vec<Embedding>) {
    let (gallery, rest): (Vec<_>, Vec<_>) = rows.into_iter().partition(|e| e.mask_status == MaskStatus::Unmasked);
    let (probes, unknown): (Vec<_>, Vec<_>) = rest.into_iter().partition(|e| e.mask_status == MaskStatus::Masked);
    for e in unknown {
        log::warn!("skipping {} with unknown mask status", e.source_id);
    }
    (gallery, probes)
}

fn write_split(rows: &[Embedding], path: &Path, dim: usize) -> CmdResult {
    EmbeddingFile::new(dim, rows.to_vec()).data()?.write(path, FileFormat::Binary).internal()
}

pub fn index(a: &IndexArgs) -> CmdResult {
    let file = EmbeddingFile::read(&a.embeddings).data()?;
    let dim = file.dimension();
    let (gallery, probes) = split_by_mask(file.into_rows());
    let units: Vec<Embedding> = gallery
        .iter()
        .map(|e| Embedding::normalized(e.source_id.clone(), e.subject.clone(), e.mask_status, &e.values))
        .collect::<Result<_, _>>()
        .data()?;
    GalleryIndex::build(&units, Metric::CosineDistance).data()?;
    write_split(&gallery, &a.gallery_out, dim)?;
    write_split(&probes, &a.probes_out, dim)?;
    println!("gallery: {} entries, probes: {}", gallery.len(), probes.len());
    Ok(())
}

fn match_failure(e: MatchError) -> Failure {
    match e {
        MatchError::Index(_) | MatchError::GalleryRoleViolation | MatchError::ProbeNotNormalized { .. } => {
            Failure::Data(e.into())
        }
        other => Failure::Internal(other.into()),
    }
}

fn write_montages(results: &[MatchResult], data: &Path, out: &Path) -> CmdResult {
    let manifest: HashMap<String, ManifestRow> =
        load_manifest(data)?.into_iter().map(|r| (r.id.clone(), r)).collect();
    let dir = out.join(MONTAGE_DIR);
    create_dir(&dir)?;
    let lookup = |id: &str| {
        let row = manifest.get(id).ok_or_else(|| data_err(format!("{id} is not in {}", data.display())))?;
        load_record(data, row).data()
    };
    for r in results {
        let Some(best) = &r.best_id else { continue };
        let montage = side_by_side(&lookup(&r.probe_id)?.image, &lookup(best)?.image, MONTAGE_HEIGHT);
        let name = format!("{}__{best}.png", r.probe_id);
        atomic_write(&dir.join(name), &encode_png(&montage).internal()?).internal()?;
    }
    Ok(())
}

pub fn match_cmd(a: &MatchArgs) -> CmdResult {
    let cfg = MatchConfig { shortlist_k: a.k, threshold: a.threshold, require_unmasked_gallery: !a.no_mask_check };
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let (gallery, probes) = match (&a.embeddings, &a.gallery, &a.probes) {
        (Some(path), _, _) => split_by_mask(load_units(path)?),
        (None, Some(g), Some(p)) => (load_units(g)?, load_units(p)?),
        _ => return Err(usage("give --embeddings or both --gallery and --probes")),
    };
    if !a.no_mask_check {
        if let Some(p) = probes.iter().find(|p| p.mask_status != MaskStatus::Masked) {
            return Err(data_err(format!("probe {} is {}, expected masked", p.source_id, p.mask_status)));
        }
    }
    let index = GalleryIndex::build(&gallery, Metric::CosineDistance).map_err(|e| match e {
        IndexError::EmptyGallery => data_err("gallery is empty"),
        other => Failure::Data(other.into()),
    })?;
    let results = match_all(&probes, &index, &cfg).map_err(match_failure)?;

    create_dir(&a.out)?;
    let mut body = Vec::new();
    for r in &results {
        serde_json::to_writer(&mut body, r).internal()?;
        body.push(b'\n');
    }
    atomic_write(&a.out.join(MATCHES_FILE), &body).internal()?;
    if a.render {
        write_montages(&results, a.data.as_deref().expect("clap requires --data"), &a.out)?;
    }
    let accepted = results.iter().filter(|r| r.accepted).count();
    println!("matched {} probes against {} gallery entries, {accepted} accepted", results.len(), index.len());
    Ok(())
}

pub fn calibrate(a: &CalibrateArgs) -> CmdResult {
    let gallery = load_units(&a.gallery)?;
    let probes = load_units(&a.probes)?;
    let (genuine, impostor) = genuine_impostor_scores(&probes, &gallery).map_err(match_failure)?;
    let cal = calibrate_threshold(&genuine, &impostor).data()?;
    let json = serde_json::to_string_pretty(&cal).internal()?;
    if let Some(out) = &a.out {
        atomic_write(out, json.as_bytes()).internal()?;
    }
    println!("{json}");
    Ok(())
}

fn read_matches(path: &Path) -> Result<Vec<MatchResult>, Failure> {
    let text = fs::read_to_string(path).with_context(|| path.display().to_string()).data()?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1)).data())
        .collect()
}

pub fn evaluate(a: &EvaluateArgs) -> CmdResult {
    let matches = read_matches(&a.matches)?;
    let truth = read_truth(&a.truth).data()?;
    let curves = a.curves.as_deref().map(load_curve_log).transpose().data()?;
    let report = evaluation::evaluate(&matches, &truth).data()?;
    create_dir(&a.out)?;
    render_report(&report, curves.as_ref(), &a.out).internal()?;
    print!("{}", render_text(&report));
    Ok(())
}

pub fn serve(a: &ServeArgs) -> CmdResult {
    let defaults = MatchConfig { shortlist_k: a.k, threshold: a.threshold, require_unmasked_gallery: true };
    defaults.validate().map_err(|e| usage(e.to_string()))?;
    let embedder = match &a.model {
        Some(path) => {
            let cfg = model_config(path, &a.model_args);
            Some(Arc::new(ImageEmbedder::load(&cfg, PreprocessConfig::default()).data()?))
        }
        None => None,
    };
    let dim = a.model_args.dim.unwrap_or(DEFAULT_DIM);
    let store = Arc::new(GalleryStore::open(&a.store, dim).data()?);
    let state = AppState { store, embedder, defaults };

    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| usage(format!("bad --host/--port: {e}")))?;
    let runtime = tokio::runtime::Runtime::new().internal()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}")).data()?;
        let bound = listener.local_addr().internal()?;
        println!("listening on {bound}");
        io::stdout().flush().internal()?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        mufm_service::serve(listener, state, shutdown).await.internal()
    })
}

