use std::time::{Duration, Instant};

use rhythmvae::vae::{LatentVector, VaeModel};
use rhythmvae_service::session::{Session, StreamEvent};

#[test]
fn burst_of_latent_moves_settles_on_the_last_one() {
    let model = VaeModel::new(21);
    let session = Session::new();
    session.set_model(model.clone()).unwrap();
    let mut rx = session.subscribe();

    let start = Instant::now();
    let mut last = LatentVector::default();
    for i in 0..100 {
        let t = i as f64 / 99.0;
        last = LatentVector::new(-3.0 + 6.0 * t, 2.0 * (t * 7.0).sin());
        session.submit_latent(last).unwrap();
        let due = start + Duration::from_micros(500 * (i + 1));
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            std::thread::sleep(wait);
        }
    }
    assert!(start.elapsed() < Duration::from_millis(200));

    let expected = model.generate(last, session.threshold()).unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    let mut published = 0;
    loop {
        assert!(Instant::now() < deadline, "final pattern never published");
        match rx.try_recv() {
            Ok(StreamEvent::Pattern(p)) => {
                published += 1;
                if p.latent == Some(last) {
                    assert_eq!(p.to_pattern().unwrap(), expected);
                    break;
                }
            }
            Ok(_) => {}
            Err(_) => std::thread::sleep(Duration::from_millis(2)),
        }
    }
    assert!(published <= 101);
    assert_eq!(session.pattern().unwrap().to_pattern().unwrap(), expected);
    assert_eq!(session.snapshot().latent, last);
}

#[test]
fn concurrent_setters_each_see_a_fresh_pattern() {
    let model = VaeModel::new(2);
    let session = Session::new();
    session.set_model(model.clone()).unwrap();
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let s = session.clone();
            std::thread::spawn(move || {
                for k in 0..10 {
                    let z = LatentVector::new(i as f64 * 0.1, k as f64 * 0.1);
                    s.set_latent(z, Duration::from_secs(10)).unwrap();
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let z = session.snapshot().latent;
    let p = session.set_latent(z, Duration::from_secs(10)).unwrap();
    assert_eq!(p.to_pattern().unwrap(), model.generate(z, 0.5).unwrap());
}
