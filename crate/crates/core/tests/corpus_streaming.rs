use idmap_core::corpus::{CorpusReader, CorpusWriter, UtteranceMeta};

/// Peak resident set of this process, in kB.
fn peak_rss_kb() -> u64 {
    let status = std::fs::read_to_string("/proc/self/status").unwrap();
    status
        .lines()
        .find(|l| l.starts_with("VmHWM:"))
        .and_then(|l| l.split_whitespace().nth(1))
        .and_then(|v| v.parse().ok())
        .unwrap()
}

#[test]
fn hundred_thousand_rows_stream_in_bounded_memory() {
    const ROWS: usize = 100_000;
    const DIM: usize = 256;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("big.svec");
    let before = peak_rss_kb();
    let mut w = CorpusWriter::create(&path, DIM).unwrap();
    let mut row = vec![0f32; DIM];
    for i in 0..ROWS {
        row.iter_mut().enumerate().for_each(|(j, v)| *v = ((i * 31 + j) % 97) as f32);
        let meta = UtteranceMeta {
            utterance_id: format!("u{i:06}"),
            speaker_label: format!("s{:03}", i % 500),
            duration_seconds: Some(3.0),
        };
        w.append(&meta, &row).unwrap();
    }
    assert_eq!(w.finish().unwrap(), ROWS as u64);
    let mut count = 0usize;
    let mut checksum = 0f64;
    for item in CorpusReader::open(&path).unwrap() {
        let (meta, v) = item.unwrap();
        assert_eq!(meta.utterance_id, format!("u{count:06}"));
        checksum += v[count % DIM] as f64;
        count += 1;
    }
    assert_eq!(count, ROWS);
    assert!(checksum > 0.0);
    let payload_kb = (ROWS * DIM * 4 / 1024) as u64;
    let grown = peak_rss_kb().saturating_sub(before);
    // The id set kept for duplicate detection is the only per-row state.
    assert!(grown < payload_kb / 4, "peak grew {grown} kB for a {payload_kb} kB payload");
}
