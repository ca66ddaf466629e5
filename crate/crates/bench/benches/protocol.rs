use bytes::BytesMut;
use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use gatewise_core::protocol::{encode_frame, Frame, FrameCodec};
use tokio_util::codec::Decoder;

fn token_frames(c: &mut Criterion) {
    let frames: Vec<Frame> =
        (0..512).map(|seq| Frame::Token { request_id: 42, seq, text: format!(" tok{seq}") }).collect();
    let mut wire = BytesMut::new();
    for f in &frames {
        encode_frame(f, &mut wire);
    }

    let mut g = c.benchmark_group("protocol");
    g.throughput(Throughput::Elements(frames.len() as u64));
    g.bench_function("encode_512_tokens", |b| {
        let mut buf = BytesMut::with_capacity(wire.len());
        b.iter(|| {
            buf.clear();
            for f in &frames {
                encode_frame(f, &mut buf);
            }
        })
    });
    g.bench_function("decode_512_tokens", |b| {
        b.iter(|| {
            let mut codec = FrameCodec::new();
            let mut src = wire.clone();
            let mut n = 0;
            while let Some(_f) = codec.decode(&mut src).unwrap() {
                n += 1;
            }
            assert_eq!(n, 512);
        })
    });
    g.finish();
}

criterion_group!(benches, token_frames);
criterion_main!(benches);
