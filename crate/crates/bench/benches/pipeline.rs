use criterion::{black_box, criterion_group, criterion_main, Criterion};
use fluorotwin::{Bus, Topic, TwinPose, TwinSync};
use fluorotwin_bench::phantom;

fn render(c: &mut Criterion) {
    let f = phantom();
    let mut seq = 0u64;
    c.bench_function("render_cine_640x480", |b| {
        b.iter(|| {
            seq += 1;
            f.renderer.render(black_box(&f.robot), seq * 33_333, seq).unwrap()
        })
    });
}

fn detect(c: &mut Criterion) {
    let mut f = phantom();
    c.bench_function("detect_640x480", |b| {
        b.iter(|| f.detector.process(black_box(&f.frame)).unwrap())
    });
}

fn twin_apply(c: &mut Criterion) {
    let mut f = phantom();
    let mut det = f.detector.process(&f.frame).unwrap().expect("robot visible");
    let mut twin = TwinSync::new(Some(f.calibration));
    c.bench_function("twin_apply", |b| {
        b.iter(|| {
            det.frame_seq += 1;
            det.t_mono_us += 33_333;
            twin.apply_detection(black_box(&det), det.t_mono_us + 5_000).unwrap()
        })
    });
}

fn bus_publish(c: &mut Criterion) {
    let bus = Bus::new();
    let sub = bus.subscribe(Topic::TwinPose).unwrap();
    let pose = TwinPose {
        x_mm: 12.5,
        y_mm: -0.25,
        v_inst: 4.0,
        v_1s: 4.1,
        v_10s: 3.9,
        mismatch_px: 0.0,
        latency_us: 9_000,
    };
    c.bench_function("bus_publish_and_drain", |b| {
        b.iter(|| {
            bus.publish(Topic::TwinPose, black_box(&pose)).unwrap();
            sub.try_recv().unwrap()
        })
    });
}

criterion_group!(benches, render, detect, twin_apply, bus_publish);
criterion_main!(benches);
