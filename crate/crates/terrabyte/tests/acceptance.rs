//! End-to-end acceptance run. Runs every criterion in sequence, prints one
//! PASS/FAIL line each and exits non-zero if any failed.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Cursor, Read};
use std::panic::{self, AssertUnwindSafe};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{Duration as Days, NaiveDate};
use common::{hashed_files, oracle_match, part_keys, small_spec, FailingStore, Portal};
use rand::seq::{IndexedRandom, IteratorRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqwest::StatusCode;
use terrabyte::archive::read_archive;
use terrabyte::client::{
    get_files, Client, FakeClock, FetchError, LoopSettings, PartOutcome, PartSource, ProgressEvent,
};
use terrabyte::datagen::bench::{run_parallel_user_bench, run_transfer_comparison, write_size_corpora, BenchConfig, BenchEnv};
use terrabyte::datagen::CorpusSpec;
use terrabyte::gateway::{AppState, GatewayConfig, RunningGateway};
use terrabyte::objectstore::{LatencyModel, LocalDirStore, ObjectStore};
use terrabyte_core::pipeline::check_event_log;
use terrabyte_core::{
    AbandonCause, BackoffPolicy, DatasetClass, FileType, ImageRecord, ObservedStatus, PartState, PartitionPolicy, Query,
    StageEvent, StageEventKind,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

/// The seed-42 corpus behind a running gateway, shared by several criteria.
struct Shared {
    portal: Portal,
}

fn main() {
    let started = Instant::now();
    let shared = Shared { portal: Portal::start(&CorpusSpec::default(), |_, _| {}) };
    println!(
        "seed-42 corpus: {} files, {:.1} MB (ready in {:.1} s)",
        shared.portal.corpus.manifest.files.len(),
        shared.portal.corpus.manifest.total_bytes() as f64 / 1e6,
        started.elapsed().as_secs_f64()
    );

    let criteria: Vec<(&str, fn(&Shared) -> Outcome)> = vec![
        ("query oracle equivalence", query_oracle),
        ("double-buffer invariants", double_buffer),
        ("end-to-end fidelity", fidelity),
        ("backoff law", backoff_law),
        ("fault isolation", fault_isolation),
        ("sample contract", sample_contract),
        ("parallel users trend", parallel_users),
        ("small vs large files trend", file_sizes),
        ("security surface", security_surface),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let t = Instant::now();
        let outcome = match panic::catch_unwind(AssertUnwindSafe(|| run(&shared))) {
            Ok(o) => o,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<28} {secs:>7.1} s  {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name:<28} {secs:>7.1} s  {detail}");
            }
        }
    }
    println!("{failed} of 9 criteria failed ({:.0} s total)", started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn random_query(rng: &mut ChaCha8Rng, labels: &[String], plants: &[String]) -> Query {
    let day0 = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
    let mut q = Query::default();
    if rng.random_bool(0.6) {
        let n = rng.random_range(1..=3);
        q.species = labels.choose_multiple(rng, n).cloned().collect();
        if rng.random_bool(0.1) {
            q.species.push("Cactus".into());
        }
    }
    if rng.random_bool(0.4) {
        q.age_min = Some(rng.random_range(0..40));
    }
    if rng.random_bool(0.4) {
        q.age_max = Some(q.age_min.unwrap_or(0) + rng.random_range(0..40));
    }
    if rng.random_bool(0.3) {
        q.date_min = Some(day0 + Days::days(rng.random_range(0..300)));
    }
    if rng.random_bool(0.3) {
        let from = q.date_min.unwrap_or(day0);
        q.date_max = Some(from + Days::days(rng.random_range(0..200)));
    }
    if rng.random_bool(0.1) {
        q.plant_id = plants.choose(rng).cloned();
    }
    if rng.random_bool(0.6) {
        let k = rng.random_range(1..=4);
        q.filetypes = FileType::ALL.into_iter().choose_multiple(rng, k).into_iter().collect();
    }
    if rng.random_bool(0.05) {
        q.dataset_class = DatasetClass::Field;
    }
    q
}

fn query_oracle(s: &Shared) -> Outcome {
    let corpus = &s.portal.corpus;
    let records: Vec<&ImageRecord> = corpus.manifest.records().collect();
    let labels: Vec<String> = records.iter().filter_map(|r| r.label.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let plants: Vec<String> = records.iter().filter_map(|r| r.plant_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let mut nonempty = 0;
    for i in 0..200 {
        let q = random_query(&mut rng, &labels, &plants);
        let expected = records.iter().filter(|r| oracle_match(&q, r)).count();
        let got = corpus.catalog.count_matches(&q).map_err(|e| format!("query {i}: {e}"))?;
        let listed = corpus.catalog.list_matches(&q).map_err(|e| format!("query {i}: {e}"))?.len();
        ensure!(got == expected && listed == expected, "query {i} {q:?}: engine {got}/{listed}, scan {expected}");
        nonempty += usize::from(expected > 0);
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(10), "200 queries took {took:?}");
    Ok(format!("200/200 counts equal over {} records, {nonempty} non-empty, {took:.2?}", records.len()))
}

/// Replays a job's log against the three double-buffer rules without
/// trusting the engine's own checker.
fn audit_log(parts: usize, log: &[StageEvent]) -> Vec<String> {
    let mut problems = Vec::new();
    let mut state = vec![PartState::Pending; parts];
    let mut staged_at = vec![None; parts];
    let mut deleted_at = vec![None; parts];
    let mut staging_order = Vec::new();
    let mut peak = 0;
    for (pos, e) in log.iter().enumerate() {
        state[e.part] = match e.kind {
            StageEventKind::StagingBegin => {
                staged_at[e.part] = Some(pos);
                staging_order.push(e.part);
                PartState::Staging
            }
            StageEventKind::Ready => PartState::Ready,
            StageEventKind::Served => PartState::Served,
            StageEventKind::Deleted => {
                deleted_at[e.part] = Some(pos);
                PartState::Deleted
            }
            StageEventKind::Failed => PartState::Failed,
        };
        let resident = state.iter().filter(|s| matches!(s, PartState::Staging | PartState::Ready)).count();
        peak = peak.max(resident);
        if resident > 2 {
            problems.push(format!("{resident} parts resident after event {pos}"));
        }
    }
    for i in 0..parts.saturating_sub(2) {
        match (deleted_at[i], staged_at[i + 2]) {
            (Some(d), Some(s)) if s > d => {}
            (d, s) => problems.push(format!("part {} staged at {s:?}, part {i} deleted at {d:?}", i + 2)),
        }
    }
    if staging_order != (0..parts).collect::<Vec<_>>() {
        problems.push(format!("staging order {staging_order:?}"));
    }
    if peak == 0 {
        problems.push("nothing was ever resident".into());
    }
    problems
}

fn double_buffer(_: &Shared) -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store_root = dir.path().join("blobs");
    let plain = LocalDirStore::open(&store_root, LatencyModel::default()).map_err(|e| e.to_string())?;
    let catalog = write_size_corpora(&plain, 150, 1, 3_000_000, 5).map_err(|e| e.to_string())?;
    let catalog_path = dir.path().join("catalog.jsonl");
    terrabyte::snapshot::save_catalog(&catalog_path, &catalog).map_err(|e| e.to_string())?;

    let mut config = GatewayConfig::new(catalog_path, store_root.clone(), dir.path().join("staging"), common::user_entries().clone());
    config.listen = ([127, 0, 0, 1], 0).into();
    config.latency = LatencyModel { per_object_delay_ms: 4, bandwidth_cap: 0 };
    config.partition = PartitionPolicy { target_part_bytes: 64 * 1024 * 1024, max_part_files: 3 };
    let store: Arc<dyn ObjectStore> = Arc::new(LocalDirStore::open(&store_root, config.latency).map_err(|e| e.to_string())?);
    let state = AppState::with_parts(&config, Arc::new(catalog), store).map_err(|e| e.to_string())?;
    let gateway = RunningGateway::start_with(state, config.listen, &config.tls).map_err(|e| e.to_string())?;
    let cert = dir.path().join("cert.pem");
    std::fs::write(&cert, gateway.cert_pem()).map_err(|e| e.to_string())?;
    let client_config = terrabyte::client::ClientConfig {
        server_url: gateway.url(),
        username: "alice".into(),
        password: "alice-pw".into(),
        tls_trust: terrabyte::client::TlsTrust::Pem(cert),
        backoff: BackoffPolicy { initial_ms: 5, factor: 1.6, cap_ms: 100 },
        max_tries: 500,
        ..Default::default()
    };
    let client = Client::new(&client_config).map_err(|e| e.to_string())?;

    // a consumer that is sometimes slower and sometimes faster than staging
    let q = Query { species: vec!["small-files".into()], ..Query::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut job = None;
    let report = client
        .download_with(&q, &dir.path().join("out"), client_config.loop_settings(), &terrabyte::client::SystemClock, &mut |p| {
            job.get_or_insert_with(|| p.job_id.to_owned());
            if p.event == ProgressEvent::Extracted {
                std::thread::sleep(Duration::from_millis(rng.random_range(0..25)));
            }
        })
        .map_err(|e| e.to_string())?;
    let job = job.ok_or("no progress reported")?;
    ensure!(report.parts_total == 50, "job has {} parts", report.parts_total);
    ensure!(report.parts_completed == 50, "{report:?}");
    let log: Vec<StageEvent> = gateway.state().engine.events(&job).map_err(|e| e.to_string())?.into_iter().map(|t| t.event).collect();
    let problems = audit_log(50, &log);
    ensure!(problems.is_empty(), "{} violations: {:?}", problems.len(), &problems[..problems.len().min(5)]);
    let engine_view = check_event_log(50, &log);
    ensure!(engine_view.is_empty(), "engine checker disagrees: {engine_view:?}");
    Ok(format!("50 parts, {} events, 0 violations", log.len()))
}

/// Archive names of every file in `dir`, paired with their hashes, turned
/// back into `(record_id, hash)`.
fn by_record_id(files: Vec<(String, String)>) -> BTreeMap<(String, String), usize> {
    let mut out = BTreeMap::new();
    for (name, hash) in files {
        let id = name.rsplit_once('.').map_or(name.as_str(), |(stem, _)| stem).to_owned();
        *out.entry((id, hash)).or_insert(0) += 1;
    }
    out
}

fn fidelity(s: &Shared) -> Outcome {
    let p = &s.portal;
    let dest = p.fresh_dir("fidelity");
    let client = p.client("alice");
    let start = Instant::now();
    let report = client
        .download(&Query::default(), &dest, p.client_config("alice", "alice-pw").loop_settings())
        .map_err(|e| e.to_string())?;
    let took = start.elapsed();
    ensure!(report.parts_abandoned.is_empty(), "abandoned {:?}", report.abandon_causes);
    let got = by_record_id(hashed_files(&dest));
    let want: BTreeMap<(String, String), usize> = p.corpus.manifest.files.iter().fold(BTreeMap::new(), |mut m, f| {
        *m.entry((f.record_id.clone(), f.content_hash.clone())).or_insert(0) += 1;
        m
    });
    ensure!(got == want, "extracted {} distinct (id, hash) pairs, manifest has {}", got.len(), want.len());
    ensure!(took < Duration::from_secs(300), "download took {took:?}");
    let _ = std::fs::remove_dir_all(&dest);
    Ok(format!(
        "{} files, {:.1} MB in {} parts, {:.1} s",
        report.files_written,
        report.bytes_written as f64 / 1e6,
        report.parts_total,
        took.as_secs_f64()
    ))
}

/// Answers from a script, then keeps saying "not ready".
struct Scripted {
    statuses: Mutex<Vec<ObservedStatus>>,
    fetches: Mutex<Vec<Result<Vec<u8>, FetchError>>>,
}

impl Scripted {
    fn new(mut statuses: Vec<ObservedStatus>, mut fetches: Vec<Result<Vec<u8>, FetchError>>) -> Self {
        statuses.reverse();
        fetches.reverse();
        Scripted { statuses: Mutex::new(statuses), fetches: Mutex::new(fetches) }
    }
}

impl PartSource for Scripted {
    fn status(&self, _: &str, _: usize) -> ObservedStatus {
        self.statuses.lock().unwrap().pop().unwrap_or(ObservedStatus::NotReady)
    }

    fn fetch(&self, _: &str, _: usize) -> Result<Box<dyn Read + '_>, FetchError> {
        let next = self.fetches.lock().unwrap().pop().expect("unexpected fetch");
        next.map(|bytes| Box::new(Cursor::new(bytes)) as Box<dyn Read>)
    }
}

fn backoff_law(_: &Shared) -> Outcome {
    let settings = LoopSettings { backoff: BackoffPolicy::default(), max_tries: 5 };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ms = |c: &FakeClock| c.sleeps().iter().map(|d| d.as_millis() as u64).collect::<Vec<_>>();

    let clock = FakeClock::new();
    let never = Scripted::new(vec![], vec![]);
    let outcome = get_files(&never, &clock, settings, "j", 0, dir.path(), &mut |_| {});
    ensure!(ms(&clock) == [200, 320, 512, 819, 1311], "sleeps {:?}", ms(&clock));
    ensure!(outcome == PartOutcome::Abandoned(AbandonCause::MaxTries), "{outcome:?}");

    // two misses, a ready answer whose transfer breaks, then misses again
    let clock = FakeClock::new();
    let interrupted = Scripted::new(
        vec![ObservedStatus::NotReady, ObservedStatus::NotReady, ObservedStatus::Ready],
        vec![Err(FetchError::Interrupted("reset".into()))],
    );
    let outcome = get_files(&interrupted, &clock, settings, "j", 0, dir.path(), &mut |_| {});
    ensure!(ms(&clock) == [200, 320, 200, 320, 512, 819, 1311], "after reset: {:?}", ms(&clock));
    ensure!(outcome == PartOutcome::Abandoned(AbandonCause::MaxTries), "{outcome:?}");

    // a ready answer delivers without sleeping further
    let clock = FakeClock::new();
    let tar = terrabyte::archive::build_archive([("a.json", &b"{}"[..])]).map_err(|e| e.to_string())?;
    let delivered = Scripted::new(vec![ObservedStatus::NotReady, ObservedStatus::Ready], vec![Ok(tar)]);
    let outcome = get_files(&delivered, &clock, settings, "j", 0, dir.path(), &mut |_| {});
    ensure!(ms(&clock) == [200], "{:?}", ms(&clock));
    ensure!(matches!(outcome, PartOutcome::Completed { .. }), "{outcome:?}");
    Ok("200, 320, 512, 819, 1311 then abandon; reset after a ready answer".into())
}

fn fault_isolation(_: &Shared) -> Outcome {
    let spec = small_spec(77, 40);
    let policy = PartitionPolicy { target_part_bytes: 400_000, ..PartitionPolicy::default() };
    let q = Query::default();
    let mut results = Vec::new();
    for k in [0usize, 4] {
        let p = Portal::start_with_store(
            &spec,
            |c, _| c.partition = policy,
            |corpus, store| Arc::new(FailingStore { inner: store, fail: part_keys(corpus, &policy, &q, k) }),
        );
        let dest = p.fresh_dir("faulty");
        let report = p
            .client("alice")
            .download(&q, &dest, p.client_config("alice", "alice-pw").loop_settings())
            .map_err(|e| e.to_string())?;
        ensure!(report.parts_abandoned == vec![k], "k={k}: abandoned {:?}", report.parts_abandoned);
        ensure!(report.parts_completed == report.parts_total - 1, "k={k}: {report:?}");
        let failed = part_keys(&p.corpus, &policy, &q, k);
        let mut want: Vec<(String, String)> = p
            .corpus
            .manifest
            .files
            .iter()
            .filter(|f| !failed.contains(&f.blob_key))
            .map(|f| (f.record.archive_name(), f.content_hash.clone()))
            .collect();
        want.sort();
        ensure!(hashed_files(&dest) == want, "k={k}: delivered files differ from the other parts' files");
        results.push(format!("k={k} of {}", report.parts_total));
    }
    Ok(format!("exactly {{k}} abandoned, rest delivered ({})", results.join(", ")))
}

fn sample_contract(s: &Shared) -> Outcome {
    let p = &s.portal;
    let http = p.http();
    let some_plant = p.corpus.manifest.records().find_map(|r| r.plant_id.clone()).ok_or("no plants")?;
    let queries = [
        Query::default(),
        Query { species: vec!["Soybean".into(), "Fallopia convolvulus".into()], ..Query::default() },
        Query { age_min: Some(10), age_max: Some(20), filetypes: [FileType::SinglePlantImage, FileType::MetadataJson].into(), ..Query::default() },
        Query { plant_id: Some(some_plant), ..Query::default() },
        Query { species: vec!["Canola".into()], date_min: NaiveDate::from_ymd_opt(2021, 6, 1), ..Query::default() },
        Query { species: vec!["Cactus".into()], ..Query::default() },
    ];
    let by_name: BTreeMap<String, &ImageRecord> = p.corpus.manifest.records().map(|r| (r.archive_name(), r)).collect();
    let mut small_pools = 0;
    for (i, q) in queries.iter().enumerate() {
        let resp = http.post(p.url("/sample")).basic_auth("alice", Some("alice-pw")).json(q).send().map_err(|e| e.to_string())?;
        if !p.corpus.manifest.records().any(|r| oracle_match(q, r)) {
            ensure!(resp.status() == StatusCode::NOT_FOUND, "query {i} matches nothing but got HTTP {}", resp.status());
            continue;
        }
        ensure!(resp.status() == StatusCode::OK, "query {i}: HTTP {}", resp.status());
        let body = resp.bytes().map_err(|e| e.to_string())?;
        let entries = read_archive(&body[..]).map_err(|e| e.to_string())?;
        let names: Vec<&String> = entries.iter().map(|(n, _)| n).collect();
        ensure!(names.iter().collect::<BTreeSet<_>>().len() == names.len(), "query {i}: duplicate entries");
        let picked: Vec<&ImageRecord> = names.iter().filter_map(|n| by_name.get(n.as_str()).copied()).collect();
        for r in &picked {
            ensure!(oracle_match(q, r), "query {i}: {} does not match", r.record_id);
        }
        for ft in &q.filetypes {
            let available = p.corpus.manifest.records().filter(|r| r.filetype == *ft && oracle_match(q, r)).count();
            let got = picked.iter().filter(|r| r.filetype == *ft).count();
            ensure!(got == available.min(20), "query {i}: {ft:?} got {got}, available {available}");
            small_pools += usize::from(available < 20);
        }
        // everything else is an image's record sidecar
        for n in &names {
            if by_name.get(n.as_str()).is_none() {
                let id = n.strip_suffix(".json").ok_or_else(|| format!("query {i}: stray entry {n}"))?;
                ensure!(picked.iter().any(|r| r.record_id == id && r.filetype.is_image()), "query {i}: orphan sidecar {n}");
            }
        }
    }
    Ok(format!("{} queries, min(20, available) per filetype, {small_pools} pools under 20", queries.len()))
}

fn parallel_users(s: &Shared) -> Outcome {
    let corpus = &s.portal.corpus;
    let query = Query {
        species: vec!["Soybean".into(), "Canola".into(), "Wheat".into()],
        filetypes: [FileType::SinglePlantImage].into(),
        ..Query::default()
    };
    let bytes: u64 = corpus.manifest.records().filter(|r| oracle_match(&query, r)).map(|r| r.byte_size).sum();
    // the shared link moves the whole dataset in about two seconds
    let latency = LatencyModel { per_object_delay_ms: 20, bandwidth_cap: bytes / 2 };
    let mut config = BenchConfig::new(6, query, latency);
    config.timeout = Duration::from_secs(900);
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let env = BenchEnv::start(&corpus.catalog_path, &corpus.store_root, work.path(), &config).map_err(|e| e.to_string())?;
    let report = run_parallel_user_bench(env, &config).map_err(|e| e.to_string())?;
    print!("{report}");
    let solo = report.solo.download_time;
    for u in &report.users {
        ensure!(u.download_time >= solo, "user {} took {:?}, solo {solo:?}", u.user + 1, u.download_time);
    }
    let gain = solo.as_secs_f64() / report.solo.precompiled_time.as_secs_f64();
    ensure!(gain >= 2.0, "precompiled only {gain:.2}x faster for the solo user");
    let slowest = report.users.iter().map(|u| u.download_time).max().unwrap_or_default();
    Ok(format!(
        "{} files; solo {:.1} s, parallel up to {:.1} s, precompiled {:.2} s ({gain:.1}x)",
        report.file_count,
        solo.as_secs_f64(),
        slowest.as_secs_f64(),
        report.solo.precompiled_time.as_secs_f64()
    ))
}

fn file_sizes(_: &Shared) -> Outcome {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let latency = LatencyModel { per_object_delay_ms: 20, bandwidth_cap: 0 };
    let cmp = run_transfer_comparison(work.path(), 1000, 10, 20_000_000, latency, Duration::from_secs(900))
        .map_err(|e| e.to_string())?;
    print!("{cmp}");
    ensure!(cmp.small.files == 1000 && cmp.large.files == 10, "{cmp:?}");
    let ratio = cmp.ratio();
    ensure!(ratio >= 2.0, "large files only {ratio:.2}x faster");
    Ok(format!("{:.2} vs {:.2} MB/s ({ratio:.1}x)", cmp.small.speed, cmp.large.speed))
}

/// A request body that the local parser and validator both reject.
fn fuzzed_body(rng: &mut ChaCha8Rng) -> Vec<u8> {
    const VALID: &str = r#"{"species":["Soybean"],"age_min":3,"age_max":30,"date_min":"2021-02-01","date_max":"2021-08-30","plant_id":"tray001-p1","filetypes":["single_plant_image","metadata_json"],"dataset_class":"eagli_lab"}"#;
    const FIELDS: [&str; 9] =
        ["species", "age_min", "age_max", "date_min", "date_max", "plant_id", "filetypes", "dataset_class", "precompiled_id"];
    const ODD: [&str; 16] = [
        "null", "-1", "1e999", "18446744073709551616", "\"\"", "\"2021-13-01\"", "\"2021-02-30\"", "[]", "{}", "[1,2]",
        "\"../../etc/passwd\"", "true", "\"\\u0000\"", "[\"no_such_type\"]", "\"x\"", "4294967296",
    ];
    loop {
        let body: Vec<u8> = match rng.random_range(0..9) {
            0 => {
                let mut b = vec![0u8; rng.random_range(0..600)];
                rng.fill_bytes(&mut b);
                b
            }
            1 => VALID.as_bytes()[..rng.random_range(0..VALID.len())].to_vec(),
            2 => {
                let mut b = VALID.as_bytes().to_vec();
                for _ in 0..rng.random_range(1..4) {
                    let i = rng.random_range(0..b.len());
                    b[i] = rng.random();
                }
                b
            }
            3 => format!("{{\"{}\": {}}}", FIELDS.choose(rng).unwrap(), ODD.choose(rng).unwrap()).into_bytes(),
            4 => {
                let field = *FIELDS.choose(rng).unwrap();
                let odd = *ODD.choose(rng).unwrap();
                let mut v: serde_json::Value = serde_json::from_str(VALID).unwrap();
                match serde_json::from_str(odd) {
                    Ok(x) => {
                        v[field] = x;
                        serde_json::to_vec(&v).unwrap()
                    }
                    // not representable as a Value: splice the text in, possibly as a duplicate key
                    Err(_) => format!("{},\"{field}\":{odd}}}", &VALID[..VALID.len() - 1]).into_bytes(),
                }
            }
            5 => {
                let depth = rng.random_range(100..20_000);
                format!("{{\"species\": {}{}}}", "[".repeat(depth), "]".repeat(depth)).into_bytes()
            }
            6 => ["[]", "null", "42", "\"query\"", "true", "[{}]", "{\"species\": \"Soybean\"}"].choose(rng).unwrap().as_bytes().to_vec(),
            7 => format!(r#"{{"age_min": {}, "age_max": {}}}"#, rng.random_range(10..100), rng.random_range(0..10)).into_bytes(),
            _ => format!(r#"{{"unknown_{}": 1, "species": []}}"#, rng.random::<u16>()).into_bytes(),
        };
        let accepted = serde_json::from_slice::<serde_json::Value>(&body)
            .ok()
            .filter(serde_json::Value::is_object)
            .and_then(|v| serde_json::from_value::<Query>(v).ok())
            .is_some_and(|q| q.validate().is_ok());
        if !accepted && body.len() < 60 * 1024 {
            return body;
        }
    }
}

fn security_surface(s: &Shared) -> Outcome {
    let p = &s.portal;
    let http = p.http();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut tally: BTreeMap<u16, usize> = BTreeMap::new();
    for i in 0..1000 {
        let body = fuzzed_body(&mut rng);
        let path = ["/check", "/sample", "/jobs"][i % 3];
        let signed_in = rng.random_bool(0.85);
        let mut req = http.post(p.url(path)).body(body.clone());
        if signed_in {
            req = req.basic_auth("alice", Some("alice-pw"));
        }
        let status = req.send().map_err(|e| format!("request {i}: {e}"))?.status();
        *tally.entry(status.as_u16()).or_insert(0) += 1;
        let expected = if signed_in { StatusCode::BAD_REQUEST } else { StatusCode::UNAUTHORIZED };
        ensure!(status == expected, "request {i} to {path}: HTTP {status}, body {:?}", String::from_utf8_lossy(&body[..body.len().min(80)]));
    }

    // bob probes every part of alice's jobs
    let alice = p.client("alice");
    let mut probes = 0;
    for q in [
        Query { filetypes: [FileType::MetadataJson].into(), ..Query::default() },
        Query { species: vec!["Soybean".into()], ..Query::default() },
    ] {
        let ticket = alice.create_job(&q).map_err(|e| e.to_string())?;
        let mut indices: Vec<String> = (0..ticket.part_count).map(|i| i.to_string()).collect();
        indices.extend([ticket.part_count.to_string(), "999999".into(), "-1".into(), "zero".into()]);
        for idx in &indices {
            for suffix in ["/status", ""] {
                let url = p.url(&format!("/jobs/{}/parts/{idx}{suffix}", ticket.job_id));
                let status = http.get(url).basic_auth("bob", Some("bob-pw")).send().map_err(|e| e.to_string())?.status();
                ensure!(status == StatusCode::FORBIDDEN, "probe {idx}{suffix}: HTTP {status}");
                probes += 1;
            }
        }
        p.gateway.state().engine.cleanup_job(&ticket.job_id);
    }
    Ok(format!("1000 bodies -> {tally:?}; {probes} cross-user probes -> 403"))
}
