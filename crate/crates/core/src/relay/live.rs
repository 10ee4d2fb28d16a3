//! Real-time driver: pumps a [`PacketChannel`] and socket events through a
//! [`Relay`] until told to stop.

use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{bounded, select, Receiver};

use super::{Relay, SocketUpstream, UpstreamEvent};
use crate::net_io::{NetIoError, PacketChannel};
use crate::rtt::Connector;

const IDLE_TICK: Duration = Duration::from_millis(20);

pub struct LiveRelay<C> {
    relay: Relay,
    upstream: SocketUpstream<C>,
    events: Receiver<UpstreamEvent>,
    channel: Arc<dyn PacketChannel>,
    write_errors: u64,
}

impl<C> LiveRelay<C>
where
    C: Connector<Stream = TcpStream> + Clone + Send + 'static,
{
    pub fn new(relay: Relay, connector: C, channel: Arc<dyn PacketChannel>) -> Self {
        let clock = relay.clock.clone();
        let (upstream, events) = SocketUpstream::new(connector, clock);
        LiveRelay { relay, upstream, events, channel, write_errors: 0 }
    }

    pub fn upstream_mut(&mut self) -> &mut SocketUpstream<C> {
        &mut self.upstream
    }

    pub fn relay(&self) -> &Relay {
        &self.relay
    }

    pub fn into_relay(self) -> Relay {
        self.relay
    }

    pub fn write_errors(&self) -> u64 {
        self.write_errors
    }

    fn write_all(&mut self, packets: Vec<Vec<u8>>) -> Result<(), NetIoError> {
        for p in packets {
            match self.channel.write_packet(&p) {
                Ok(()) => {}
                Err(NetIoError::ChannelClosed) => return Err(NetIoError::ChannelClosed),
                Err(e) => {
                    self.write_errors += 1;
                    log::warn!("tunnel write: {e}");
                }
            }
        }
        Ok(())
    }

    /// Relay until `stop` is set or the tunnel closes, then abort every
    /// remaining flow. `tick` runs roughly every 20 ms.
    pub fn run(&mut self, stop: &AtomicBool, mut tick: impl FnMut(&Relay)) -> Result<(), NetIoError> {
        let (pkt_tx, pkt_rx) = bounded::<Vec<u8>>(1024);
        let reader_stop = Arc::new(AtomicBool::new(false));
        let channel = self.channel.clone();
        let rstop = reader_stop.clone();
        let reader = thread::Builder::new().name("tunnel-reader".into()).spawn(move || {
            while !rstop.load(Ordering::Acquire) {
                match channel.read_packet(Some(Duration::from_millis(50))) {
                    Ok(Some(p)) => {
                        if pkt_tx.send(p).is_err() {
                            return;
                        }
                    }
                    Ok(None) => {}
                    Err(NetIoError::ChannelClosed) => return,
                    Err(e) => {
                        log::error!("tunnel read: {e}");
                        return;
                    }
                }
            }
        })?;

        let mut result = Ok(());
        while !stop.load(Ordering::Acquire) {
            let now = self.relay.clock.now_ns();
            let wait = self
                .relay
                .next_deadline()
                .map_or(IDLE_TICK, |d| Duration::from_nanos(d.saturating_sub(now)).min(IDLE_TICK));
            let out = select! {
                recv(pkt_rx) -> p => match p {
                    Ok(p) => self.relay.handle_tunnel_packet(&p, &mut self.upstream),
                    Err(_) => break,
                },
                recv(self.events) -> ev => match ev {
                    Ok(ev) => self.relay.handle_upstream_event(ev, &mut self.upstream),
                    Err(_) => Vec::new(),
                },
                default(wait) => Vec::new(),
            };
            if let Err(e) = self.write_all(out) {
                result = Err(e);
                break;
            }
            let out = self.relay.poll_timers(&mut self.upstream);
            if let Err(e) = self.write_all(out) {
                result = Err(e);
                break;
            }
            tick(&self.relay);
        }
        let out = self.relay.shutdown_all(&mut self.upstream);
        let _ = self.write_all(out);
        reader_stop.store(true, Ordering::Release);
        drop(pkt_rx);
        let _ = reader.join();
        result
    }
}
