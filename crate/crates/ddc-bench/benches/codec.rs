use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};

use ddc_bench::{desk_codec, desk_segments};
use ddc_core::eval::{lossless_baseline_cg, LosslessCoder};
use ddc_core::pipeline::wire;

fn bench_encode_all(c: &mut Criterion) {
    let codec = desk_codec(0);
    let segments = desk_segments(16, 1);
    let mut group = c.benchmark_group("encode_all");
    group.throughput(Throughput::Elements(segments.len() as u64));
    group.bench_function("m1024_levels_64_32_1", |b| {
        b.iter(|| {
            for seg in &segments {
                std::hint::black_box(codec.encode_all(seg).unwrap());
            }
        })
    });
    group.finish();
}

fn bench_decode(c: &mut Criterion) {
    let codec = desk_codec(0);
    let segments = desk_segments(16, 2);
    let records: Vec<_> = segments
        .iter()
        .flat_map(|seg| {
            codec
                .encode_all(seg)
                .unwrap()
                .into_iter()
                .filter(|e| !e.level.is_identity)
                .map(|e| e.to_record(seg.id))
                .collect::<Vec<_>>()
        })
        .collect();
    let mut group = c.benchmark_group("decode");
    group.throughput(Throughput::Elements(records.len() as u64));
    group.bench_function("m1024_levels_64_32", |b| {
        b.iter(|| {
            for record in &records {
                std::hint::black_box(codec.decode(record).unwrap());
            }
        })
    });
    group.finish();
}

fn bench_wire(c: &mut Criterion) {
    let codec = desk_codec(0);
    let segments = desk_segments(64, 3);
    let records: Vec<_> = segments
        .iter()
        .map(|seg| codec.encode_all(seg).unwrap()[1].to_record(seg.id))
        .collect();
    let stream = wire::write_stream(&records).unwrap();
    let mut group = c.benchmark_group("wire");
    group.throughput(Throughput::Bytes(stream.len() as u64));
    group.bench_function("serialize_stream", |b| {
        b.iter(|| std::hint::black_box(wire::write_stream(&records).unwrap()))
    });
    group.bench_function("deserialize_stream", |b| {
        b.iter_batched(
            || stream.clone(),
            |s| std::hint::black_box(wire::read_stream(&s).unwrap()),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn bench_lossless_baseline(c: &mut Criterion) {
    let segments = desk_segments(32, 4);
    let mut group = c.benchmark_group("lossless_baseline");
    group.throughput(Throughput::Elements(segments.len() as u64));
    group.bench_function("deflate_cg", |b| {
        b.iter(|| std::hint::black_box(lossless_baseline_cg(&segments, LosslessCoder::Deflate)))
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_encode_all,
    bench_decode,
    bench_wire,
    bench_lossless_baseline
);
criterion_main!(benches);
