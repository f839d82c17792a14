use std::collections::BTreeMap;
use std::sync::Arc;

use spare_core::token::{embed_token, mint_token};
use spare_core::{Firewall, FirewallConfig, FirewallPolicy, KeyMaterial, TokenPayload};
use spare_gateway::{DeviceView, ManualClock, RunningGateway, ServiceConfig, VerdictBody};

const NOON: i64 = 1_710_028_800 + 12 * 3600;

fn config(r: u32) -> FirewallConfig {
    let key = KeyMaterial::from_hex(
        "000102030405060708090a0b0c0d0e0f",
        "101112131415161718191a1b1c1d1e1f",
    )
    .unwrap();
    let policy = FirewallPolicy {
        daily_threshold: r,
        ..FirewallPolicy::default()
    };
    FirewallConfig::new(policy, key).unwrap()
}

fn service(r: u32) -> ServiceConfig {
    ServiceConfig {
        listen_address: "127.0.0.1:0".into(),
        ..ServiceConfig::new(config(r))
    }
}

fn query(cfg: &FirewallConfig, ts: i64, dev: &str, resubmit: bool) -> String {
    let t = mint_token(&TokenPayload::new(ts, dev).unwrap(), &cfg.key).unwrap();
    embed_token("/resource", &t, resubmit)
}

async fn get(gw: &RunningGateway, path: &str) -> (u16, VerdictBody) {
    let resp = reqwest::get(gw.url(path)).await.unwrap();
    let status = resp.status().as_u16();
    (
        status,
        serde_json::from_str(&resp.text().await.unwrap()).unwrap(),
    )
}

async fn devices(gw: &RunningGateway) -> BTreeMap<String, DeviceView> {
    let resp = reqwest::get(gw.url("/admin/devices")).await.unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    serde_json::from_str(&resp.text().await.unwrap()).unwrap()
}

async fn reset(gw: &RunningGateway, id: &str) -> u16 {
    let resp = reqwest::Client::new()
        .post(gw.url(&format!("/admin/devices/{id}/reset")))
        .send()
        .await
        .unwrap();
    resp.status().as_u16()
}

#[tokio::test]
async fn resource_status_codes() {
    let clock = ManualClock::new(NOON);
    let gw = RunningGateway::start(service(30), Arc::new(clock.clone()))
        .await
        .unwrap();
    let cfg = config(30);

    let (s, b) = get(&gw, &query(&cfg, NOON, "dev1", false)).await;
    assert_eq!((s, b.verdict.as_str(), b.reason), (200, "accept", None));

    for path in [
        "/resource",
        "/resource?resubmit=true",
        "/resource?id=",
        "/resource?id=%%%",
        "/resource?id=@@",
    ] {
        let (s, b) = get(&gw, path).await;
        assert_eq!(s, 403, "{path}");
        assert_eq!(b.verdict, "reject");
        assert!(b.reason.is_some());
    }
    let (_, b) = get(&gw, "/resource").await;
    assert_eq!(b.reason.as_deref(), Some("MissingToken"));

    let (s, b) = get(&gw, &query(&cfg, NOON - 3601, "dev1", false)).await;
    assert_eq!((s, b.reason.as_deref()), (403, Some("StaleToken")));
    gw.stop().await.unwrap();
}

#[tokio::test]
async fn admin_endpoints() {
    let clock = ManualClock::new(NOON);
    let gw = RunningGateway::start(service(3), Arc::new(clock.clone()))
        .await
        .unwrap();
    let cfg = config(3);
    assert!(devices(&gw).await.is_empty());

    for i in 0..2 {
        assert_eq!(get(&gw, &query(&cfg, NOON - i, "dev1", false)).await.0, 200);
    }
    let d = devices(&gw).await;
    assert_eq!(d["dev1"].count_today, 2);
    assert_eq!(d["dev1"].last_request_time, Some(NOON));
    assert_eq!(d["dev1"].blocked_until, None);

    for i in 2..4 {
        get(&gw, &query(&cfg, NOON - i, "dev1", false)).await;
    }
    let d = devices(&gw).await;
    assert!(d["dev1"].blocked_until.is_some());
    assert_eq!(
        get(&gw, &query(&cfg, NOON - 10, "dev1", false))
            .await
            .1
            .reason
            .as_deref(),
        Some("DeviceBlocked")
    );

    assert_eq!(reset(&gw, "dev1").await, 204);
    assert!(!devices(&gw).await.contains_key("dev1"));
    assert_eq!(
        get(&gw, &query(&cfg, NOON - 11, "dev1", false)).await.0,
        200
    );
    assert_eq!(reset(&gw, "never-seen").await, 204);
    gw.stop().await.unwrap();
}

#[tokio::test]
async fn snapshot_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("ledger.json");
    let mut svc = service(2);
    svc.snapshot_path = Some(snap.clone());
    let clock = ManualClock::new(NOON);
    let cfg = config(2);

    let gw = RunningGateway::start(svc.clone(), Arc::new(clock.clone()))
        .await
        .unwrap();
    for i in 0..2 {
        assert_eq!(get(&gw, &query(&cfg, NOON - i, "dev1", false)).await.0, 200);
    }
    gw.stop().await.unwrap();
    assert!(snap.exists());

    let gw = RunningGateway::start(svc.clone(), Arc::new(clock.clone()))
        .await
        .unwrap();
    assert_eq!(devices(&gw).await["dev1"].count_today, 2);
    let (s, b) = get(&gw, &query(&cfg, NOON - 5, "dev1", false)).await;
    assert_eq!((s, b.reason.as_deref()), (403, Some("ThresholdExceeded")));
    // Other devices are unaffected.
    let (_, b) = get(&gw, &query(&cfg, NOON, "dev2", false)).await;
    assert_eq!(b.verdict, "accept");
    gw.stop().await.unwrap();

    std::fs::write(&snap, b"not a snapshot").unwrap();
    assert!(RunningGateway::start(svc, Arc::new(clock)).await.is_err());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn periodic_snapshot_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("ledger.json");
    let mut svc = service(30);
    svc.snapshot_path = Some(snap.clone());
    svc.snapshot_interval = 1;
    let gw = RunningGateway::start(svc, Arc::new(ManualClock::new(NOON)))
        .await
        .unwrap();
    get(&gw, &query(&config(30), NOON, "dev1", false)).await;
    tokio::time::sleep(std::time::Duration::from_millis(1500)).await;
    let ledger = spare_core::DeviceLedger::restore(&std::fs::read(&snap).unwrap()).unwrap();
    assert_eq!(ledger.get("dev1").unwrap().count_today, 1);
    gw.stop().await.unwrap();
}

/// Same inputs through HTTP and through the in-process firewall.
#[tokio::test]
async fn matches_in_process_firewall() {
    let clock = ManualClock::new(NOON);
    let gw = RunningGateway::start(service(5), Arc::new(clock.clone()))
        .await
        .unwrap();
    let cfg = config(5);
    let mut local = Firewall::new(cfg.clone());
    let mut now = NOON;
    for i in 0..60i64 {
        now += i % 7;
        clock.set(now);
        let dev = format!("dev{}", i % 3);
        let ts = if i % 11 == 0 {
            now - 4000
        } else {
            now - (i % 5)
        };
        let t = mint_token(&TokenPayload::new(ts, dev).unwrap(), &cfg.key).unwrap();
        let resubmit = i % 13 == 0;
        let expect = local.validate(Some(&t), resubmit, now);
        let (status, body) = get(&gw, &embed_token("/resource", &t, resubmit)).await;
        assert_eq!(body, VerdictBody::from(expect), "request {i}");
        assert_eq!(status, if expect.is_accept() { 200 } else { 403 });
    }
    gw.stop().await.unwrap();
}
